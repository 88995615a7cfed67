//! Limit objects of the normalized design: `lambda`, `T`, `ell`, `L` and the
//! asymptotic covariances of the estimators.
//!
//! `S_n / |T_n|` has the block limit `L = [[1, lambda^t], [lambda, ell]]`:
//! the top-left block counts mothers, the off-diagonal block is the mean
//! regression vector and the bottom-right block its second moment.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BarError, Result};
use crate::model::{is_stable, BarParams, CompanionPair};
use crate::noise::NoiseMoments;

/// Iteration cap of the fixed-point cross-check.
pub const FIXED_POINT_MAX_ITER: usize = 1_000_000;
/// Fixed-point stopping threshold on the Frobenius step, scaled by `max(1, |ell|)`.
pub const FIXED_POINT_STEP_TOL: f64 = 1e-12;
/// Required relative agreement between the direct solve and the iteration.
pub const CROSS_CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LimitTheory {
    pub p: usize,
    pub lambda: DVector<f64>,
    pub t: DMatrix<f64>,
    pub ell: DMatrix<f64>,
    /// `L`, `(p+1) x (p+1)`.
    pub big_l: DMatrix<f64>,
    /// `Gamma (x) L^{-1}`
    pub theta_cov: DMatrix<f64>,
    /// `(tau4 - 2 sigma^4 + nu2) / 2`
    pub sigma2_clt_var: f64,
    /// `nu2 - rho^2`
    pub rho_clt_var: f64,
}

impl LimitTheory {
    /// `Lambda = I_2 (x) L`.
    pub fn big_lambda(&self) -> DMatrix<f64> {
        DMatrix::<f64>::identity(2, 2).kronecker(&self.big_l)
    }

    pub fn to_document(&self) -> LimitDocument {
        LimitDocument {
            p: self.p,
            lambda: self.lambda.iter().copied().collect(),
            t: rows(&self.t),
            ell: rows(&self.ell),
            l: rows(&self.big_l),
            big_lambda: rows(&self.big_lambda()),
            theta_cov: rows(&self.theta_cov),
            sigma2_clt_var: self.sigma2_clt_var,
            rho_clt_var: self.rho_clt_var,
        }
    }
}

/// Serialized form of [`LimitTheory`]; matrices are lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitDocument {
    pub p: usize,
    pub lambda: Vec<f64>,
    pub t: Vec<Vec<f64>>,
    pub ell: Vec<Vec<f64>>,
    pub l: Vec<Vec<f64>>,
    pub big_lambda: Vec<Vec<f64>>,
    pub theta_cov: Vec<Vec<f64>>,
    pub sigma2_clt_var: f64,
    pub rho_clt_var: f64,
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn e1(p: usize) -> DVector<f64> {
    let mut e = DVector::zeros(p);
    e[0] = 1.0;
    e
}

/// `lambda = a_bar (I - A_bar)^{-1} e_1`.
pub fn lambda_limit(params: &BarParams) -> Result<DVector<f64>> {
    params.validate()?;
    let p = params.p;
    let mean = params.companion().mean();
    let eigen = if p == 1 {
        vec![(mean[(0, 0)], 0.0)]
    } else {
        mean.clone().complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
    };
    if let Some(&(re, im)) = eigen
        .iter()
        .find(|(re, im)| ((re - 1.0).powi(2) + im * im).sqrt() < 1e-12)
    {
        return Err(BarError::domain(format!(
            "I - A_bar is singular: A_bar has eigenvalue {re} + {im}i at 1"
        )));
    }
    let system = DMatrix::<f64>::identity(p, p) - mean;
    let x = system
        .lu()
        .solve(&e1(p))
        .ok_or_else(|| BarError::domain("I - A_bar is singular"))?;
    Ok(x * params.mean_intercept())
}

/// `T = (sigma2 + a2_bar) e1 e1^t + (a_0 (A lambda e1^t + e1 lambda^t A^t) + b_0 (B lambda e1^t + e1 lambda^t B^t)) / 2`.
pub fn t_matrix(params: &BarParams, sigma2: f64, lambda: &DVector<f64>) -> DMatrix<f64> {
    let p = params.p;
    let pair = params.companion();
    let e = e1(p);
    let mut t = &e * e.transpose() * (sigma2 + params.mean_sq_intercept());
    for (c0, m) in [(params.a[0], &pair.a), (params.b[0], &pair.b)] {
        let ml = m * lambda;
        let outer = &ml * e.transpose();
        t += (&outer + outer.transpose()) * (0.5 * c0);
    }
    t
}

/// `(A ell A^t + B ell B^t) / 2`
fn half_sandwich(pair: &CompanionPair, ell: &DMatrix<f64>) -> DMatrix<f64> {
    (&pair.a * ell * pair.a.transpose() + &pair.b * ell * pair.b.transpose()) * 0.5
}

/// Direct solve of `vec(ell) = (I - (A(x)A + B(x)B)/2)^{-1} vec(T)`.
pub fn ell_direct(pair: &CompanionPair, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = pair.dim();
    let op = (pair.a.kronecker(&pair.a) + pair.b.kronecker(&pair.b)) * 0.5;
    let system = DMatrix::<f64>::identity(p * p, p * p) - op;
    let rhs = DVector::from_column_slice(t.as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| BarError::Instability("I - (A(x)A + B(x)B)/2 is singular".into()))?;
    let ell = DMatrix::from_column_slice(p, p, sol.as_slice());
    Ok((&ell + ell.transpose()) * 0.5)
}

/// Fixed-point iteration `ell <- T + (A ell A^t + B ell B^t)/2` from zero.
/// Returns the iterate and the number of steps taken.
pub fn ell_fixed_point(pair: &CompanionPair, t: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let p = pair.dim();
    let mut ell = DMatrix::<f64>::zeros(p, p);
    for iter in 1..=FIXED_POINT_MAX_ITER {
        let next = t + half_sandwich(pair, &ell);
        let step = (&next - &ell).norm();
        ell = next;
        if !step.is_finite() {
            break;
        }
        if step < FIXED_POINT_STEP_TOL * ell.norm().max(1.0) {
            return Ok((ell, iter));
        }
    }
    Err(BarError::Consistency(format!(
        "fixed-point iteration for ell did not converge in {FIXED_POINT_MAX_ITER} steps"
    )))
}

/// Partial sum `sum_{k <= depth} 2^{-k} sum_{|w| = k} C_w T C_w^t` of the
/// series representation of `ell`.
pub fn ell_series(pair: &CompanionPair, t: &DMatrix<f64>, depth: usize) -> DMatrix<f64> {
    let mut term = t.clone();
    let mut total = t.clone();
    for _ in 0..depth {
        term = half_sandwich(pair, &term);
        total += &term;
    }
    total
}

/// Frobenius residual of `ell = T + (A ell A^t + B ell B^t)/2`.
pub fn ell_residual(pair: &CompanionPair, t: &DMatrix<f64>, ell: &DMatrix<f64>) -> f64 {
    (ell - t - half_sandwich(pair, ell)).norm()
}

/// `(T, ell)`; the direct solve is checked against the fixed-point iteration.
pub fn ell_solve(
    params: &BarParams,
    sigma2: f64,
    lambda: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    params.validate()?;
    if sigma2.is_nan() || sigma2 < 0.0 {
        return Err(BarError::validation("sigma2 must be non-negative"));
    }
    let pair = params.companion();
    let t = t_matrix(params, sigma2, lambda);
    let direct = ell_direct(&pair, &t)?;
    let (iterated, _) = ell_fixed_point(&pair, &t)?;
    let gap = (&direct - &iterated).norm();
    if gap > CROSS_CHECK_TOL * direct.norm() {
        return Err(BarError::Consistency(format!(
            "direct and fixed-point solutions for ell differ by {gap:e}"
        )));
    }
    Ok((t, direct))
}

/// All limit objects for a contracting model and a noise law.
pub fn assemble(params: &BarParams, moments: &NoiseMoments) -> Result<LimitTheory> {
    let report = is_stable(params)?;
    if !report.stable {
        return Err(BarError::Instability(format!(
            "companion matrices fail the contraction check (best joint bound {:.6})",
            report.joint_bound()
        )));
    }
    moments.validate()?;
    let p = params.p;
    let lambda = lambda_limit(params)?;
    let (t, ell) = ell_solve(params, moments.sigma2, &lambda)?;

    let mut big_l = DMatrix::<f64>::zeros(p + 1, p + 1);
    big_l[(0, 0)] = 1.0;
    for i in 0..p {
        big_l[(0, i + 1)] = lambda[i];
        big_l[(i + 1, 0)] = lambda[i];
        for j in 0..p {
            big_l[(i + 1, j + 1)] = ell[(i, j)];
        }
    }
    let l_inv = big_l
        .clone()
        .cholesky()
        .ok_or_else(|| BarError::domain("limit matrix L is not positive definite"))?
        .inverse();
    let l_inv = (&l_inv + l_inv.transpose()) * 0.5;
    let g = moments.gamma();
    let gamma = DMatrix::from_row_slice(2, 2, &[g[0][0], g[0][1], g[1][0], g[1][1]]);
    let NoiseMoments { sigma2, rho, tau4, nu2 } = *moments;

    Ok(LimitTheory {
        p,
        lambda,
        t,
        ell,
        theta_cov: gamma.kronecker(&l_inv),
        big_l,
        sigma2_clt_var: (tau4 - 2.0 * sigma2 * sigma2 + nu2) / 2.0,
        rho_clt_var: nu2 - rho * rho,
    })
}
