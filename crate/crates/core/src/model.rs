//! Model parameters, companion matrices and the contraction check.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BarError, Result};

/// Deepest word length accepted by [`stability_report`]; the enumeration
/// visits `2^k` products at depth `k`.
pub const MAX_STABILITY_DEPTH: usize = 20;
pub const DEFAULT_STABILITY_DEPTH: usize = 8;

/// Coefficients of an asymmetric BAR(p) model.
///
/// `a = (a_0, .., a_p)` drives the even daughter and `b = (b_0, .., b_p)`
/// the odd one; index 0 is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarParams {
    pub p: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl BarParams {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let params = BarParams { p: a.len().saturating_sub(1), a, b };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(BarError::validation("order p must be at least 1"));
        }
        if self.a.len() != self.p + 1 || self.b.len() != self.p + 1 {
            return Err(BarError::validation(format!(
                "order {} needs {} coefficients per daughter, got a:{} b:{}",
                self.p,
                self.p + 1,
                self.a.len(),
                self.b.len()
            )));
        }
        if self.a.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(BarError::validation("coefficients must be finite"));
        }
        Ok(())
    }

    /// Number of regression coefficients per daughter, `p + 1`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.p + 1
    }

    /// `vec(theta) = (a_0..a_p, b_0..b_p)`.
    pub fn theta_vec(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.dim(), self.a.iter().chain(&self.b).copied())
    }

    pub fn from_theta_vec(p: usize, theta: &[f64]) -> Result<Self> {
        if theta.len() != 2 * (p + 1) {
            return Err(BarError::validation("theta length must be 2(p+1)"));
        }
        Self::new(theta[..=p].to_vec(), theta[p + 1..].to_vec())
    }

    /// `(a_0 + b_0) / 2`
    pub fn mean_intercept(&self) -> f64 {
        0.5 * (self.a[0] + self.b[0])
    }

    /// `(a_0^2 + b_0^2) / 2`
    pub fn mean_sq_intercept(&self) -> f64 {
        0.5 * (self.a[0] * self.a[0] + self.b[0] * self.b[0])
    }

    pub fn companion(&self) -> CompanionPair {
        companion_matrices(self)
    }
}

/// Companion matrices of the two daughter recursions.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl CompanionPair {
    pub fn mean(&self) -> DMatrix<f64> {
        (&self.a + &self.b) * 0.5
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

fn companion(coeffs: &[f64]) -> DMatrix<f64> {
    let p = coeffs.len();
    let mut m = DMatrix::zeros(p, p);
    for (j, &c) in coeffs.iter().enumerate() {
        m[(0, j)] = c;
    }
    for i in 1..p {
        m[(i, i - 1)] = 1.0;
    }
    m
}

/// Companion matrices built from the slopes `a_1..a_p` and `b_1..b_p`.
pub fn companion_matrices(params: &BarParams) -> CompanionPair {
    CompanionPair { a: companion(&params.a[1..]), b: companion(&params.b[1..]) }
}

/// Spectral norms, spectral radii and exhaustive product bounds of `{A, B}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub spectral_norm_a: f64,
    pub spectral_norm_b: f64,
    pub spectral_radius_a: f64,
    pub spectral_radius_b: f64,
    /// `max_{|w| = k} ||C_w||^(1/k)` for each depth `k`.
    pub product_norm_by_depth: Vec<(usize, f64)>,
    /// Running minimum of `product_norm_by_depth`; every entry bounds the
    /// joint spectral radius from above.
    pub jsr_upper_by_depth: Vec<(usize, f64)>,
    pub stable: bool,
}

impl StabilityReport {
    /// Best joint bound found, `min_k max_{|w| = k} ||C_w||^(1/k)`.
    pub fn joint_bound(&self) -> f64 {
        self.jsr_upper_by_depth.last().map_or(f64::INFINITY, |&(_, v)| v)
    }
}

/// Largest singular value, from the symmetric eigenproblem of `C^t C`.
pub fn spectral_norm(c: &DMatrix<f64>) -> f64 {
    let gram = c.transpose() * c;
    let eig = gram.symmetric_eigenvalues();
    eig.iter().fold(0.0f64, |m, &v| m.max(v)).max(0.0).sqrt()
}

pub fn spectral_radius(c: &DMatrix<f64>) -> f64 {
    if c.nrows() == 1 {
        return c[(0, 0)].abs();
    }
    c.clone()
        .complex_eigenvalues()
        .iter()
        .fold(0.0f64, |m, z| m.max(z.norm()))
}

pub fn stability_report(pair: &CompanionPair, max_depth: usize) -> Result<StabilityReport> {
    if max_depth == 0 {
        return Err(BarError::validation("stability depth must be at least 1"));
    }
    if max_depth > MAX_STABILITY_DEPTH {
        return Err(BarError::validation(format!(
            "stability depth {max_depth} exceeds {MAX_STABILITY_DEPTH}"
        )));
    }

    let mut max_norm = vec![0.0f64; max_depth];
    let id = DMatrix::identity(pair.dim(), pair.dim());
    visit_words(pair, &id, 0, max_depth, &mut max_norm);

    let product_norm_by_depth: Vec<(usize, f64)> = max_norm
        .iter()
        .enumerate()
        .map(|(i, &m)| (i + 1, m.powf(1.0 / (i + 1) as f64)))
        .collect();
    let mut best = f64::INFINITY;
    let jsr_upper_by_depth: Vec<(usize, f64)> = product_norm_by_depth
        .iter()
        .map(|&(k, v)| {
            best = best.min(v);
            (k, best)
        })
        .collect();

    Ok(StabilityReport {
        spectral_norm_a: spectral_norm(&pair.a),
        spectral_norm_b: spectral_norm(&pair.b),
        spectral_radius_a: spectral_radius(&pair.a),
        spectral_radius_b: spectral_radius(&pair.b),
        stable: best < 1.0,
        product_norm_by_depth,
        jsr_upper_by_depth,
    })
}

fn visit_words(
    pair: &CompanionPair,
    prefix: &DMatrix<f64>,
    depth: usize,
    max_depth: usize,
    max_norm: &mut [f64],
) {
    if depth == max_depth {
        return;
    }
    for factor in [&pair.a, &pair.b] {
        let product = prefix * factor;
        let norm = spectral_norm(&product);
        if norm > max_norm[depth] {
            max_norm[depth] = norm;
        }
        visit_words(pair, &product, depth + 1, max_depth, max_norm);
    }
}

/// Stability check with the default depth.
pub fn is_stable(params: &BarParams) -> Result<StabilityReport> {
    stability_report(&params.companion(), DEFAULT_STABILITY_DEPTH)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(a: &[f64], b: &[f64]) -> BarParams {
        BarParams::new(a.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn scalar_companions() {
        let pair = params(&[0.0, 0.5], &[0.0, 0.3]).companion();
        assert_eq!(pair.a, DMatrix::from_element(1, 1, 0.5));
        assert_eq!(pair.b, DMatrix::from_element(1, 1, 0.3));
    }

    #[test]
    fn zero_slopes_keep_subdiagonal() {
        let pair = params(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).companion();
        assert_eq!(pair.a, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn pattern_fill_uses_own_corner() {
        let pair = params(&[0.0, 0.4, 0.2], &[0.0, 0.1, -0.7]).companion();
        assert_eq!(pair.a, DMatrix::from_row_slice(2, 2, &[0.4, 0.2, 1.0, 0.0]));
        assert_eq!(pair.b, DMatrix::from_row_slice(2, 2, &[0.1, -0.7, 1.0, 0.0]));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let bad = BarParams { p: 2, a: vec![0.0, 1.0], b: vec![0.0, 1.0, 2.0] };
        assert!(bad.validate().is_err());
        assert!(BarParams::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn scalar_report() {
        let r = stability_report(&params(&[0.0, 0.5], &[0.0, 0.3]).companion(), 8).unwrap();
        assert_relative_eq!(r.spectral_norm_a, 0.5, epsilon = 1e-15);
        assert_relative_eq!(r.spectral_norm_b, 0.3, epsilon = 1e-15);
        assert_relative_eq!(r.jsr_upper_by_depth[0].1, 0.5, epsilon = 1e-15);
        assert!(r.stable);
    }

    #[test]
    fn nilpotent_pair_is_stable_at_depth_two() {
        let r = stability_report(&params(&[0.0; 3], &[0.0; 3]).companion(), 8).unwrap();
        assert_relative_eq!(r.spectral_norm_a, 1.0, epsilon = 1e-12);
        assert_eq!(r.product_norm_by_depth[1].1, 0.0);
        assert_eq!(r.jsr_upper_by_depth[1].1, 0.0);
        assert!(r.stable);
    }

    #[test]
    fn expanding_slope_is_unstable() {
        let r = stability_report(&params(&[0.0, 1.1], &[0.0, 0.3]).companion(), 8).unwrap();
        assert!(!r.stable);
    }

    #[test]
    fn depth_limits() {
        let pair = params(&[0.0, 0.5], &[0.0, 0.3]).companion();
        assert!(stability_report(&pair, 21).is_err());
        assert!(stability_report(&pair, 0).is_err());
    }

    #[test]
    fn spectral_radius_of_companion_matches_roots() {
        // x^2 - 0.5 x - 0.14 = (x - 0.7)(x + 0.2)
        let a = companion(&[0.5, 0.14]);
        assert_relative_eq!(spectral_radius(&a), 0.7, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn depth_one_is_max_norm_and_envelope_decreases(
            a in proptest::collection::vec(-1.0f64..1.0, 3),
            b in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let mut a = a; a.insert(0, 0.0);
            let mut b = b; b.insert(0, 0.0);
            let pair = params(&a, &b).companion();
            let r = stability_report(&pair, 6).unwrap();
            let top = spectral_norm(&pair.a).max(spectral_norm(&pair.b));
            prop_assert_eq!(r.jsr_upper_by_depth[0].1, top);
            for w in r.jsr_upper_by_depth.windows(2) {
                prop_assert!(w[1].1 <= w[0].1 + 1e-12);
            }
            // every bound dominates the spectral radius of the generators
            let rho = r.spectral_radius_a.max(r.spectral_radius_b);
            prop_assert!(r.joint_bound() + 1e-9 >= rho);
            let again = stability_report(&pair, 6).unwrap();
            prop_assert_eq!(r, again);
        }
    }
}
