//! Sister-pair driving noise.
//!
//! The model only pins down moments of `(eps_2k, eps_2k+1)`; two concrete
//! laws are provided. Both are independent across distinct mothers.

use serde::{Deserialize, Serialize};

use crate::error::{BarError, Result};
use crate::rng::Stream;

/// Conditional moments of a sister pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseMoments {
    /// `E[eps^2]`
    pub sigma2: f64,
    /// `E[eps_2k eps_2k+1]`
    pub rho: f64,
    /// `E[eps^4]`
    pub tau4: f64,
    /// `E[eps_2k^2 eps_2k+1^2]`
    pub nu2: f64,
}

impl NoiseMoments {
    pub fn validate(&self) -> Result<()> {
        let NoiseMoments { sigma2, rho, tau4, nu2 } = *self;
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(BarError::validation(format!("sigma2 must be positive, got {sigma2}")));
        }
        if rho.is_nan() || rho.abs() >= sigma2 {
            return Err(BarError::validation(format!(
                "sister covariance must satisfy |rho| < sigma2 (rho = {rho}, sigma2 = {sigma2})"
            )));
        }
        if nu2.is_nan() || tau4.is_nan() || nu2 >= tau4 {
            return Err(BarError::validation(format!(
                "cross moment nu2 = {nu2} must be below tau4 = {tau4}"
            )));
        }
        // Jensen, with a little room for rounding
        if tau4 < sigma2 * sigma2 * (1.0 - 1e-12) {
            return Err(BarError::validation("tau4 below sigma2^2"));
        }
        Ok(())
    }

    /// Covariance matrix `Gamma` of the pair, row-major.
    pub fn gamma(&self) -> [[f64; 2]; 2] {
        [[self.sigma2, self.rho], [self.rho, self.sigma2]]
    }
}

/// Law of the sister pair.
///
/// * `gaussian-pair`: bivariate normal with variance `sigma2` and covariance
///   `rho`. Uses two uniforms per pair.
/// * `rademacher-mixture-pair`: `eps = sigma (sqrt(1-c) U + sqrt(c) W)` for
///   the even sister and `sigma (sqrt(1-c) V + sqrt(c) W)` for the odd one,
///   with `c = rho / sigma2` and independent signs `U, V, W` (three draws per
///   pair, in that order). Requires `0 < rho < sigma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    GaussianPair { sigma2: f64, rho: f64 },
    RademacherMixturePair { sigma2: f64, rho: f64 },
}

impl NoiseSpec {
    pub fn gaussian(sigma2: f64, rho: f64) -> Result<Self> {
        let spec = NoiseSpec::GaussianPair { sigma2, rho };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rademacher_mixture(sigma2: f64, rho: f64) -> Result<Self> {
        let spec = NoiseSpec::RademacherMixturePair { sigma2, rho };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sigma2(&self) -> f64 {
        match *self {
            NoiseSpec::GaussianPair { sigma2, .. } | NoiseSpec::RademacherMixturePair { sigma2, .. } => sigma2,
        }
    }

    pub fn rho(&self) -> f64 {
        match *self {
            NoiseSpec::GaussianPair { rho, .. } | NoiseSpec::RademacherMixturePair { rho, .. } => rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let NoiseSpec::RademacherMixturePair { sigma2, rho } = *self {
            if !(rho > 0.0 && rho < sigma2) {
                return Err(BarError::validation(format!(
                    "rademacher-mixture-pair needs 0 < rho < sigma2 (rho = {rho}, sigma2 = {sigma2})"
                )));
            }
        }
        let sigma2 = self.sigma2();
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(BarError::validation(format!("sigma2 must be positive, got {sigma2}")));
        }
        // Fourth moments of tiny variances underflow; check the unit-variance law.
        self.unit_variance().raw_moments().validate()
    }

    fn unit_variance(&self) -> NoiseSpec {
        let c = self.rho() / self.sigma2();
        match self {
            NoiseSpec::GaussianPair { .. } => NoiseSpec::GaussianPair { sigma2: 1.0, rho: c },
            NoiseSpec::RademacherMixturePair { .. } => NoiseSpec::RademacherMixturePair { sigma2: 1.0, rho: c },
        }
    }

    fn raw_moments(&self) -> NoiseMoments {
        match *self {
            NoiseSpec::GaussianPair { sigma2, rho } => NoiseMoments {
                sigma2,
                rho,
                tau4: 3.0 * sigma2 * sigma2,
                nu2: sigma2 * sigma2 + 2.0 * rho * rho,
            },
            NoiseSpec::RademacherMixturePair { sigma2, rho } => {
                let c = rho / sigma2;
                NoiseMoments {
                    sigma2,
                    rho,
                    tau4: sigma2 * sigma2 * (1.0 + 4.0 * c * (1.0 - c)),
                    nu2: sigma2 * sigma2,
                }
            }
        }
    }

    /// Exact moments of the pair law.
    pub fn theoretical_moments(&self) -> Result<NoiseMoments> {
        self.validate()?;
        Ok(self.raw_moments())
    }

    /// One draw of `(eps_even, eps_odd)`.
    #[inline]
    pub fn sample_pair(&self, stream: &mut Stream) -> (f64, f64) {
        match *self {
            NoiseSpec::GaussianPair { sigma2, rho } => {
                let (z1, z2) = stream.normal_pair();
                let sigma = sigma2.sqrt();
                let c = rho / sigma2;
                (sigma * z1, sigma * (c * z1 + (1.0 - c * c).sqrt() * z2))
            }
            NoiseSpec::RademacherMixturePair { sigma2, rho } => {
                let u = stream.sign();
                let v = stream.sign();
                let w = stream.sign();
                let sigma = sigma2.sqrt();
                let c = rho / sigma2;
                let own = (1.0 - c).sqrt();
                let shared = c.sqrt() * w;
                (sigma * (own * u + shared), sigma * (own * v + shared))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Sample means of (eps_e, eps_o, eps^2 averaged over sisters, eps_e eps_o,
    /// eps^4 averaged, eps_e^2 eps_o^2) with their standard errors.
    fn empirical(spec: &NoiseSpec, draws: usize, seed: u64) -> [(f64, f64); 6] {
        let mut stream = Stream::new(seed);
        let mut sums = [[0.0f64; 2]; 6];
        for _ in 0..draws {
            let (e, o) = spec.sample_pair(&mut stream);
            let stats = [
                e,
                o,
                0.5 * (e * e + o * o),
                e * o,
                0.5 * (e.powi(4) + o.powi(4)),
                e * e * o * o,
            ];
            for (s, v) in sums.iter_mut().zip(stats) {
                s[0] += v;
                s[1] += v * v;
            }
        }
        let n = draws as f64;
        sums.map(|[s, s2]| {
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0);
            (mean, (var / n).sqrt())
        })
    }

    fn check_against_theory(spec: NoiseSpec, draws: usize, seed: u64, z: f64) {
        let m = spec.theoretical_moments().unwrap();
        let targets = [0.0, 0.0, m.sigma2, m.rho, m.tau4, m.nu2];
        for (i, ((mean, se), target)) in empirical(&spec, draws, seed).into_iter().zip(targets).enumerate() {
            assert!(
                (mean - target).abs() <= z * se.max(1e-12),
                "statistic {i}: {mean} vs {target} (se {se})"
            );
        }
    }

    #[test]
    fn gaussian_moments_closed_form() {
        let m = NoiseSpec::gaussian(1.0, 0.5).unwrap().theoretical_moments().unwrap();
        assert_relative_eq!(m.tau4, 3.0);
        assert_relative_eq!(m.nu2, 1.5);
        let m = NoiseSpec::gaussian(1.0, 0.0).unwrap().theoretical_moments().unwrap();
        assert_relative_eq!(m.nu2, 1.0);
    }

    #[test]
    fn mixture_moments_closed_form() {
        let m = NoiseSpec::rademacher_mixture(1.0, 0.5).unwrap().theoretical_moments().unwrap();
        assert_relative_eq!(m.tau4, 2.0);
        assert_relative_eq!(m.nu2, 1.0);
    }

    #[test]
    fn mixture_fourth_moment_by_enumeration() {
        // All 8 sign patterns are equally likely; expand exactly.
        for &c in &[0.1f64, 0.5, 0.9] {
            let sigma2: f64 = 2.0;
            let (own, shared) = ((1.0 - c).sqrt(), c.sqrt());
            let mut tau4 = 0.0;
            let mut nu2 = 0.0;
            let mut rho = 0.0;
            for bits in 0..8u32 {
                let s = |i: u32| if bits >> i & 1 == 1 { 1.0 } else { -1.0 };
                let e = sigma2.sqrt() * (own * s(0) + shared * s(2));
                let o = sigma2.sqrt() * (own * s(1) + shared * s(2));
                tau4 += e.powi(4) / 8.0;
                nu2 += (e * o).powi(2) / 8.0;
                rho += e * o / 8.0;
            }
            let m = NoiseSpec::rademacher_mixture(sigma2, c * sigma2).unwrap().theoretical_moments().unwrap();
            assert_relative_eq!(m.tau4, tau4, epsilon = 1e-12);
            assert_relative_eq!(m.nu2, nu2, epsilon = 1e-12);
            assert_relative_eq!(m.rho, rho, epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_monte_carlo_moments() {
        check_against_theory(NoiseSpec::gaussian(1.0, 0.5).unwrap(), 10_000_000, 11, 3.0);
        check_against_theory(NoiseSpec::gaussian(1.0, 0.0).unwrap(), 10_000_000, 12, 3.0);
    }

    #[test]
    fn mixture_monte_carlo_moments() {
        check_against_theory(NoiseSpec::rademacher_mixture(1.0, 0.5).unwrap(), 1_000_000, 13, 4.0);
        check_against_theory(NoiseSpec::rademacher_mixture(2.0, 0.3).unwrap(), 1_000_000, 14, 4.0);
    }

    #[test]
    fn empirical_covariance_close_to_rho() {
        let spec = NoiseSpec::gaussian(1.0, 0.5).unwrap();
        let stats = empirical(&spec, 1_000_000, 15);
        assert!((stats[3].0 - 0.5).abs() < 0.005);
    }

    #[test]
    fn validation_edges() {
        assert!(NoiseSpec::gaussian(1.0, 1.0).is_err());
        assert!(NoiseSpec::gaussian(1.0, -1.0).is_err());
        assert!(NoiseSpec::gaussian(0.0, 0.0).is_err());
        assert!(NoiseSpec::gaussian(f64::MIN_POSITIVE, 0.0).is_ok());
        assert!(NoiseSpec::gaussian(1.0, -0.9).is_ok());
        assert!(NoiseSpec::rademacher_mixture(1.0, 0.0).is_err());
        assert!(NoiseSpec::rademacher_mixture(1.0, -0.2).is_err());
        assert!(NoiseSpec::rademacher_mixture(1.0, 1.0).is_err());
    }

    #[test]
    fn independent_gaussian_pair_is_the_box_muller_pair() {
        let spec = NoiseSpec::gaussian(1.0, 0.0).unwrap();
        let mut a = Stream::new(2024);
        let mut b = Stream::new(2024);
        let (e, o) = spec.sample_pair(&mut a);
        let (z1, z2) = b.normal_pair();
        assert_eq!((e, o), (z1, z2));
    }

    #[test]
    fn gaussian_golden_values() {
        let spec = NoiseSpec::gaussian(1.0, 0.0).unwrap();
        let (e, o) = spec.sample_pair(&mut Stream::new(0));
        assert_eq!((e, o), GOLDEN_SEED0);
    }

    const GOLDEN_SEED0: (f64, f64) = (-1.5355413474037047, 0.3339089401215209);

    #[test]
    fn serde_shape() {
        let spec: NoiseSpec =
            serde_json::from_str(r#"{"family":"gaussian-pair","sigma2":1.0,"rho":0.5}"#).unwrap();
        assert_eq!(spec, NoiseSpec::GaussianPair { sigma2: 1.0, rho: 0.5 });
        assert!(serde_json::from_str::<NoiseSpec>(
            r#"{"family":"gaussian-pair","sigma2":1.0,"rho":0.5,"extra":1}"#
        )
        .is_err());
    }
}
