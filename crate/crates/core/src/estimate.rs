//! Least-squares estimation of `theta`, residual moment estimators, the
//! recursive inverse of the normal matrix and martingale diagnostics.
//!
//! Notation: for a mother `k`, `Y_k = (1, X_k, .., X_{k/2^(p-1)})` and
//! `Z_k = (X_2k, X_2k+1)`. The estimator built from `T_n` uses mothers in
//! `T_{n-1, p-1}` (see [`crate::treeindex::mother_range`]):
//! `theta_hat_n = S_{n-1}^{-1} sum Y_k Z_k^t`, with `S_{n-1} = sum Y_k Y_k^t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BarError, Result};
use crate::limits::LimitTheory;
use crate::model::{is_stable, BarParams};
use crate::simulate::TreeSample;
use crate::treeindex::{mother_range, tree_size};

/// Ratio of extreme eigenvalues of `S` above which it is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Largest condition number of `S` at which a streaming accumulator forms
/// its first inverse. Rank-1 updates carry the rounding error of that
/// starting inverse forward, so the chain waits for a well-conditioned start.
pub const CHAIN_START_CONDITION: f64 = 1e6;

/// Normal-matrix accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignState {
    pub s: DMatrix<f64>,
    /// Inverse of `s`, present once it has been established.
    pub s_inv: Option<DMatrix<f64>>,
    /// `sum Y_k Z_k^t`, `(p+1) x 2`.
    pub cross: DMatrix<f64>,
    pub count: u64,
}

impl DesignState {
    pub fn new(p: usize) -> Self {
        DesignState {
            s: DMatrix::zeros(p + 1, p + 1),
            s_inv: None,
            cross: DMatrix::zeros(p + 1, 2),
            count: 0,
        }
    }

    /// Starts from `S = I`, whose inverse is known.
    pub fn ridge_seeded(p: usize) -> Self {
        let id = DMatrix::identity(p + 1, p + 1);
        DesignState { s: id.clone(), s_inv: Some(id), ..DesignState::new(p) }
    }

    /// Absorbs one mother. While no inverse is on hand the matrix is only
    /// accumulated, and the inverse is formed directly the first time the
    /// condition number of `S` drops to [`CHAIN_START_CONDITION`]; after
    /// that every mother is a rank-1 update.
    pub fn absorb(&mut self, y: &DVector<f64>, z: (f64, f64)) {
        for i in 0..y.len() {
            self.cross[(i, 0)] += y[i] * z.0;
            self.cross[(i, 1)] += y[i] * z.1;
        }
        if self.s_inv.is_some() {
            rank1_update(self, y);
        } else {
            self.s.ger(1.0, y, y, 1.0);
            self.count += 1;
            if self.count as usize >= self.s.nrows() && condition(&self.s) <= CHAIN_START_CONDITION {
                self.s_inv = Some(invert_normal(&self.s).0);
            }
        }
    }

    /// `S^{-1} sum Y Z^t` in vec order, ridging with `I` when `S` is singular.
    pub fn theta(&self) -> (DVector<f64>, bool) {
        match &self.s_inv {
            Some(inv) => (vec_of(&(inv * &self.cross)), false),
            None => {
                let (inv, ridge) = invert_normal(&self.s);
                (vec_of(&(inv * &self.cross)), ridge)
            }
        }
    }
}

/// Sherman-Morrison step: adds `y y^t` to `S` and updates the inverse by
/// `S^{-1} - (S^{-1} y)(S^{-1} y)^t / (1 + y^t S^{-1} y)`.
///
/// # Panics
/// When `state.s_inv` is `None`.
pub fn rank1_update(state: &mut DesignState, y: &DVector<f64>) {
    let inv = state.s_inv.as_mut().expect("rank-1 update needs a valid inverse");
    let u = &*inv * y;
    let denom = 1.0 + y.dot(&u);
    inv.ger(-1.0 / denom, &u, &u, 1.0);
    state.s.ger(1.0, y, y, 1.0);
    state.count += 1;
}

/// Generation-level inverse update
/// `S_n^{-1} = S_{n-1}^{-1} - S_{n-1}^{-1} Phi (I + Phi^t S_{n-1}^{-1} Phi)^{-1} Phi^t S_{n-1}^{-1}`
/// where the columns of `phi` are the `Y_k` of one generation.
pub fn block_riccati_update(s_prev_inv: &DMatrix<f64>, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sp = s_prev_inv * phi;
    let mut inner = phi.transpose() * &sp;
    for i in 0..inner.nrows() {
        inner[(i, i)] += 1.0;
    }
    let inner_inv = inner
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| BarError::Consistency("I + l_n is not positive definite".into()))?;
    Ok(s_prev_inv - &sp * inner_inv * sp.transpose())
}

/// Ratio of the extreme eigenvalues of a symmetric matrix; infinite when
/// the smallest is not positive.
pub fn condition(s: &DMatrix<f64>) -> f64 {
    let eig = s.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if max > 0.0 && min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Inverse of a normal matrix, adding the identity when the matrix is
/// singular to working precision. Returns `(inverse, ridge_applied)`.
pub fn invert_normal(s: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let cond = condition(s);
    let singular = cond.is_nan() || cond >= SINGULAR_CONDITION;
    let mut m = s.clone();
    if singular {
        for i in 0..m.nrows() {
            m[(i, i)] += 1.0;
        }
    }
    let inv = match m.clone().cholesky() {
        Some(c) => c.inverse(),
        None => m.try_inverse().unwrap_or_else(|| DMatrix::zeros(s.nrows(), s.ncols())),
    };
    (symmetrize(inv), singular)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `(p+1) x 2` coefficient matrix to `(a_0..a_p, b_0..b_p)`.
fn vec_of(theta: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(theta.len(), theta.iter().copied())
}

/// Augmented regressor `Y_k` of mother `k`.
#[inline]
fn fill_y(sample: &TreeSample, k: u64, y: &mut DVector<f64>) {
    y[0] = 1.0;
    sample.fill_regressor_unchecked(k, &mut y.as_mut_slice()[1..]);
}

#[inline]
fn daughters(sample: &TreeSample, k: u64) -> (f64, f64) {
    (sample.x(2 * k), sample.x(2 * k + 1))
}

/// Least-squares fit of `theta` from `T_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaEstimate {
    pub p: usize,
    pub n_generations: u32,
    /// `(a_0..a_p, b_0..b_p)`
    pub theta_hat: DVector<f64>,
    /// `S_{n-1}` (without the ridge).
    pub normal_matrix: DMatrix<f64>,
    pub ridge_applied: bool,
}

/// Full estimation output, also the serialized result document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationResult {
    pub p: usize,
    pub theta_hat: Vec<f64>,
    pub sigma2_hat: f64,
    pub rho_hat: f64,
    pub ridge_applied: bool,
    pub n_generations: u32,
}

fn check_range(sample: &TreeSample, n: u32) -> Result<()> {
    let p = sample.p;
    if (n as usize) < p {
        return Err(BarError::domain(format!("n = {n} is below the model order p = {p}")));
    }
    if n > sample.n_generations {
        return Err(BarError::domain(format!(
            "sample covers {} generations, estimation asked for {n}",
            sample.n_generations
        )));
    }
    Ok(())
}

/// Batch least-squares estimate `theta_hat_n`.
pub fn ls_estimate(sample: &TreeSample, n: u32) -> Result<ThetaEstimate> {
    check_range(sample, n)?;
    let p = sample.p;
    let mut s = DMatrix::<f64>::zeros(p + 1, p + 1);
    let mut cross = DMatrix::<f64>::zeros(p + 1, 2);
    let mut y = DVector::<f64>::zeros(p + 1);
    for k in mother_range(i64::from(n) - 1, p as u32) {
        fill_y(sample, k, &mut y);
        let (ze, zo) = daughters(sample, k);
        s.ger(1.0, &y, &y, 1.0);
        for i in 0..=p {
            cross[(i, 0)] += y[i] * ze;
            cross[(i, 1)] += y[i] * zo;
        }
    }
    let (inv, ridge_applied) = invert_normal(&s);
    Ok(ThetaEstimate {
        p,
        n_generations: n,
        theta_hat: vec_of(&(inv * cross)),
        normal_matrix: s,
        ridge_applied,
    })
}

/// Same estimate as [`ls_estimate`], computed by absorbing mothers one at
/// a time in ascending id with rank-1 inverse updates.
pub fn streaming_estimate(sample: &TreeSample, n: u32) -> Result<(ThetaEstimate, DesignState)> {
    check_range(sample, n)?;
    let p = sample.p;
    let mut state = DesignState::new(p);
    let mut y = DVector::<f64>::zeros(p + 1);
    for k in mother_range(i64::from(n) - 1, p as u32) {
        fill_y(sample, k, &mut y);
        state.absorb(&y, daughters(sample, k));
    }
    let (theta_hat, ridge_applied) = state.theta();
    let est = ThetaEstimate {
        p,
        n_generations: n,
        theta_hat,
        normal_matrix: state.s.clone(),
        ridge_applied,
    };
    Ok((est, state))
}

/// Residual pair `(eps_hat_2k, eps_hat_2k+1)` of mother `k` under `theta`.
pub fn residual_pair(sample: &TreeSample, theta: &DVector<f64>, k: u64) -> (f64, f64) {
    let p = sample.p;
    let (ze, zo) = daughters(sample, k);
    let (mut fe, mut fo) = (theta[0], theta[p + 1]);
    for i in 1..=p {
        let x = sample.x(k >> (i - 1));
        fe += theta[i] * x;
        fo += theta[p + 1 + i] * x;
    }
    (ze - fe, zo - fo)
}

/// `(sigma2_hat_n, rho_hat_n)` from the residuals of `estimate` over
/// `T_{n-1, p-1}`, normalized by `2|T_{n-1}|` and `|T_{n-1}|`.
pub fn residual_moments(sample: &TreeSample, estimate: &ThetaEstimate) -> (f64, f64) {
    let n = estimate.n_generations;
    let p = sample.p as u32;
    let (mut sq, mut cross) = (0.0, 0.0);
    for k in mother_range(i64::from(n) - 1, p) {
        let (e, o) = residual_pair(sample, &estimate.theta_hat, k);
        sq += e * e + o * o;
        cross += e * o;
    }
    let size = tree_size(n - 1) as f64;
    (sq / (2.0 * size), cross / size)
}

/// Least squares plus residual moments.
pub fn estimate(sample: &TreeSample, n: u32) -> Result<EstimationResult> {
    let fit = ls_estimate(sample, n)?;
    let (sigma2_hat, rho_hat) = residual_moments(sample, &fit);
    Ok(EstimationResult {
        p: fit.p,
        theta_hat: fit.theta_hat.iter().copied().collect(),
        sigma2_hat,
        rho_hat,
        ridge_applied: fit.ridge_applied,
        n_generations: n,
    })
}

/// Estimate of one generation of a path; see [`estimate_path`].
#[derive(Debug, Clone)]
pub struct PathPoint {
    pub n: u32,
    pub theta_hat: DVector<f64>,
    /// `S_{n-1}`
    pub normal_matrix: DMatrix<f64>,
    pub normal_inverse: DMatrix<f64>,
    pub ridge_applied: bool,
}

/// `theta_hat_g` for every `g = p ..= n`, sharing the accumulation across
/// generations.
pub fn estimate_path(sample: &TreeSample, n: u32) -> Result<Vec<PathPoint>> {
    check_range(sample, n)?;
    let p = sample.p;
    let mut s = DMatrix::<f64>::zeros(p + 1, p + 1);
    let mut cross = DMatrix::<f64>::zeros(p + 1, 2);
    let mut y = DVector::<f64>::zeros(p + 1);
    let mut out = Vec::new();
    for g in p as u32..=n {
        // mothers of generation g - 1
        for k in (1u64 << (g - 1))..(1u64 << g) {
            fill_y(sample, k, &mut y);
            let (ze, zo) = daughters(sample, k);
            s.ger(1.0, &y, &y, 1.0);
            for i in 0..=p {
                cross[(i, 0)] += y[i] * ze;
                cross[(i, 1)] += y[i] * zo;
            }
        }
        let (inv, ridge_applied) = invert_normal(&s);
        out.push(PathPoint {
            n: g,
            theta_hat: vec_of(&(&inv * &cross)),
            normal_matrix: s.clone(),
            normal_inverse: inv,
            ridge_applied,
        });
    }
    Ok(out)
}

/// Per-generation martingale quantities, indexed by `generations`
/// (`p ..= n`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleDiagnostics {
    pub generations: Vec<u32>,
    /// `V_g = M_g^t Sigma_{g-1}^{-1} M_g`
    pub v: Vec<f64>,
    /// `|T_{g-1}| (theta_hat_g - theta)^t Lambda (theta_hat_g - theta)`
    pub theta_term: Vec<f64>,
    /// Whether `S_{g-1}` had to be ridged.
    pub ridged: Vec<bool>,
    /// `(1/g) sum_{k <= g} V_k`
    pub qsl_running: Vec<f64>,
    /// `(1/g) sum_{k <= g} theta_term_k`
    pub theta_qsl: Vec<f64>,
    /// `sum_{k in T_{g-1,p}} |eps_hat - eps|^2` over both sisters, each
    /// mother's residuals taken with the estimate of its own generation.
    pub resid_gap_sq: Vec<f64>,
    /// Same sum for `(eps_hat_2k - eps_2k)(eps_hat_2k+1 - eps_2k+1)`.
    pub resid_gap_cross: Vec<f64>,
    /// True-noise averages at the last generation over `T_{n-1,p}`.
    pub noise_sigma2: f64,
    pub noise_rho: f64,
    /// The same averages over `T_{n-1,p-1}`, the estimator's own range.
    pub noise_sigma2_estimator_range: f64,
    pub noise_rho_estimator_range: f64,
}

/// Rebuilds the true noise from the generating `params` and tracks the
/// martingale `M_g`, its normalized quadratic form and the estimation
/// errors generation by generation.
///
/// Ridged generations (where `S_{g-1}` is singular) contribute nothing to
/// the running means, which still divide by `g`.
pub fn martingale_diagnostics(
    sample: &TreeSample,
    params: &BarParams,
    limits: &LimitTheory,
    n: u32,
) -> Result<MartingaleDiagnostics> {
    check_range(sample, n)?;
    if params.p != sample.p {
        return Err(BarError::validation("parameter order differs from sample order"));
    }
    if !is_stable(params)?.stable {
        return Err(BarError::Instability("diagnostics need a contracting model".into()));
    }
    let p = sample.p;
    let d = p + 1;
    let theta = params.theta_vec();
    let true_noise = |k: u64| residual_pair(sample, &theta, k);

    let path = estimate_path(sample, n)?;
    let mut m = DVector::<f64>::zeros(2 * d);
    let mut y = DVector::<f64>::zeros(d);
    let mut out = MartingaleDiagnostics {
        generations: Vec::new(),
        v: Vec::new(),
        theta_term: Vec::new(),
        ridged: Vec::new(),
        qsl_running: Vec::new(),
        theta_qsl: Vec::new(),
        resid_gap_sq: Vec::new(),
        resid_gap_cross: Vec::new(),
        noise_sigma2: 0.0,
        noise_rho: 0.0,
        noise_sigma2_estimator_range: 0.0,
        noise_rho_estimator_range: 0.0,
    };
    let (mut v_sum, mut t_sum, mut gap_sq, mut gap_cross) = (0.0, 0.0, 0.0, 0.0);

    for point in &path {
        let g = point.n;
        for k in (1u64 << (g - 1))..(1u64 << g) {
            fill_y(sample, k, &mut y);
            let (e, o) = true_noise(k);
            for i in 0..d {
                m[i] += e * y[i];
                m[d + i] += o * y[i];
            }
        }
        let inv = &point.normal_inverse;
        let (ma, mb) = (m.rows(0, d), m.rows(d, d));
        let v = (ma.transpose() * inv * ma)[(0, 0)] + (mb.transpose() * inv * mb)[(0, 0)];

        let delta = &point.theta_hat - &theta;
        let (da, db) = (delta.rows(0, d), delta.rows(d, d));
        let quad = (da.transpose() * &limits.big_l * da)[(0, 0)]
            + (db.transpose() * &limits.big_l * db)[(0, 0)];
        let theta_term = tree_size(g - 1) as f64 * quad;

        if !point.ridge_applied {
            v_sum += v;
            t_sum += theta_term;
        }

        // mothers of generation g (daughters in g + 1) use theta_hat_g
        if g < n && g as usize >= p && !point.ridge_applied {
            for k in (1u64 << g)..(1u64 << (g + 1)) {
                let (eh, oh) = residual_pair(sample, &point.theta_hat, k);
                let (e, o) = true_noise(k);
                let (ge, go) = (eh - e, oh - o);
                gap_sq += ge * ge + go * go;
                gap_cross += ge * go;
            }
        }

        out.generations.push(g);
        out.v.push(v);
        out.theta_term.push(theta_term);
        out.ridged.push(point.ridge_applied);
        out.qsl_running.push(v_sum / f64::from(g));
        out.theta_qsl.push(t_sum / f64::from(g));
        out.resid_gap_sq.push(gap_sq);
        out.resid_gap_cross.push(gap_cross);
    }

    let size = tree_size(n - 1) as f64;
    let (mut sq_p, mut cr_p, mut sq_pm1, mut cr_pm1) = (0.0, 0.0, 0.0, 0.0);
    for k in mother_range(i64::from(n) - 1, p as u32) {
        let (e, o) = true_noise(k);
        sq_pm1 += e * e + o * o;
        cr_pm1 += e * o;
        if k >= 1u64 << p {
            sq_p += e * e + o * o;
            cr_p += e * o;
        }
    }
    out.noise_sigma2 = sq_p / (2.0 * size);
    out.noise_rho = cr_p / size;
    out.noise_sigma2_estimator_range = sq_pm1 / (2.0 * size);
    out.noise_rho_estimator_range = cr_pm1 / size;
    Ok(out)
}
