//! Seeded replicate experiments with pass/fail verdicts for the asymptotic
//! behaviour of the estimators.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BarError, Result};
use crate::estimate::{estimate_path, ls_estimate, martingale_diagnostics, residual_moments};
use crate::limits::{assemble, LimitTheory};
use crate::model::{is_stable, BarParams};
use crate::noise::{NoiseMoments, NoiseSpec};
use crate::simulate::{simulate_tree_unchecked, InitSpec, TreeSample};
use crate::treeindex::{mother_range, tree_size};

pub use crate::rng::derive_seed;

/// Standard normal distribution function, `0.5 erfc(-x / sqrt 2)`.
///
/// `erfc` is evaluated by `statrs`, whose rational approximations are
/// accurate to a few ulps, far inside the `1e-7` budget this crate needs.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// One-sample Kolmogorov-Smirnov distance between `samples` and `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((i + 1) as f64 / n - f).max(f - i as f64 / n)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Rate,
    Qsl,
    CltTheta,
    CltSigma,
    CltRho,
    LimitBridge,
    Diagnostics,
}

impl Check {
    pub const ALL: [Check; 7] = [
        Check::Rate,
        Check::Qsl,
        Check::CltTheta,
        Check::CltSigma,
        Check::CltRho,
        Check::LimitBridge,
        Check::Diagnostics,
    ];

    /// Checks comparing a sampling distribution; these need two or more replicates.
    pub fn is_distributional(self) -> bool {
        matches!(self, Check::CltTheta | Check::CltSigma | Check::CltRho)
    }

    fn needs_path(self) -> bool {
        matches!(self, Check::Rate | Check::Qsl | Check::Diagnostics)
    }
}

/// Acceptance thresholds. Defaults were fixed from calibration runs of the
/// reference configuration (master seeds 42 and 7).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Bound on the median of `|theta_hat - theta|^2 |T_{n-1}| / log |T_{n-1}|`.
    pub rate_constant: f64,
    /// Number of trailing generations in the rate window.
    pub rate_window: u32,
    pub qsl_rel: f64,
    pub ks_max: f64,
    pub cov_rel_frobenius: f64,
    pub clt_var_rel: f64,
    pub bridge_rel: f64,
    pub diagnostics_rel: f64,
    /// `max_g V_g / g` must stay below this multiple of `(p+1) sigma2` ...
    pub v_growth_multiple: f64,
    /// ... in at least this fraction of replicates.
    pub v_growth_fraction: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rate_constant: 10.0,
            rate_window: 5,
            qsl_rel: 0.15,
            ks_max: 0.08,
            cov_rel_frobenius: 0.10,
            clt_var_rel: 0.15,
            bridge_rel: 0.02,
            diagnostics_rel: 0.20,
            v_growth_multiple: 10.0,
            v_growth_fraction: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub params: BarParams,
    pub noise: NoiseSpec,
    pub init: InitSpec,
    pub n_generations: u32,
    pub replicates: usize,
    pub master_seed: u64,
    pub checks: Vec<Check>,
    pub tolerances: Tolerances,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.noise.validate()?;
        self.init.validate(self.params.p)?;
        if self.replicates == 0 {
            return Err(BarError::validation("replicates must be at least 1"));
        }
        if (self.n_generations as usize) < self.params.p + 1 {
            return Err(BarError::validation(format!(
                "n_generations = {} must exceed the order p = {}",
                self.n_generations, self.params.p
            )));
        }
        if self.n_generations > 24 {
            return Err(BarError::validation("n_generations above 24 is not supported"));
        }
        if self.checks.is_empty() {
            return Err(BarError::validation("no checks requested"));
        }
        Ok(())
    }

    fn has(&self, check: Check) -> bool {
        self.checks.contains(&check)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    InsufficientReplicates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Statistic {
    fn relative(name: impl Into<String>, value: f64, target: f64, rel: f64) -> Self {
        Statistic {
            name: name.into(),
            value,
            target,
            tolerance: rel,
            pass: (value - target).abs() <= rel * target.abs(),
        }
    }

    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Statistic { name: name.into(), value, target: bound, tolerance: 0.0, pass: value < bound }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: Check,
    pub verdict: Verdict,
    pub statistics: Vec<Statistic>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// Point estimates and diagnostics of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub theta_hat: Vec<f64>,
    pub sigma2_hat: f64,
    pub rho_hat: f64,
    /// `(g, |theta_hat_g - theta|^2 |T_{g-1}| / log |T_{g-1}|)` over the rate window.
    pub rate: Vec<(u32, f64)>,
    pub theta_qsl: Option<f64>,
    pub qsl_running: Option<f64>,
    pub gap_sq_over_n: Option<f64>,
    pub gap_cross_over_n: Option<f64>,
    pub max_v_over_g: Option<f64>,
    /// `S_n / |T_n|`, row-major.
    pub normalized_design: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub p: usize,
    pub n_generations: u32,
    pub replicates: usize,
    pub master_seed: u64,
    pub checks: Vec<CheckReport>,
    pub seeds: Vec<u64>,
    pub runtime_seconds: f64,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

impl VerificationReport {
    pub fn get(&self, check: Check) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.check == check)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.verdict != Verdict::Fail)
    }

    /// Per-replicate table as CSV. Columns that were not computed are empty.
    pub fn replicates_csv(&self) -> String {
        let mut buf = ryu::Buffer::new();
        let d = self.records.first().map_or(0, |r| r.theta_hat.len());
        let mut out = String::from("index,seed");
        for i in 0..d {
            out.push_str(&format!(",theta_hat_{i}"));
        }
        out.push_str(",sigma2_hat,rho_hat,theta_qsl,qsl_running,gap_sq_over_n,gap_cross_over_n\n");
        for r in &self.records {
            out.push_str(&format!("{},{}", r.index, r.seed));
            let cols = r.theta_hat.iter().map(|&t| Some(t)).chain([
                Some(r.sigma2_hat),
                Some(r.rho_hat),
                r.theta_qsl,
                r.qsl_running,
                r.gap_sq_over_n,
                r.gap_cross_over_n,
            ]);
            for c in cols {
                out.push(',');
                if let Some(v) = c {
                    out.push_str(buf.format(v));
                }
            }
            out.push('\n');
        }
        out
    }
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    limits: LimitTheory,
    theta: DVector<f64>,
    needs_path: bool,
}

fn simulate_replicate(config: &ExperimentConfig, seed: u64) -> Result<TreeSample> {
    simulate_tree_unchecked(&config.params, &config.noise, &config.init, config.n_generations, seed)
}

fn run_replicate(ctx: &Context<'_>, index: usize) -> Result<ReplicateRecord> {
    let cfg = ctx.config;
    let n = cfg.n_generations;
    let p = cfg.params.p;
    let seed = derive_seed(cfg.master_seed, index as u64);
    let sample = simulate_replicate(cfg, seed)
        .map_err(|e| BarError::Domain(format!("replicate {index} (seed {seed}) failed: {e}")))?;

    let fit = ls_estimate(&sample, n)?;
    let (sigma2_hat, rho_hat) = residual_moments(&sample, &fit);
    let mut record = ReplicateRecord {
        index,
        seed,
        theta_hat: fit.theta_hat.iter().copied().collect(),
        sigma2_hat,
        rho_hat,
        rate: Vec::new(),
        theta_qsl: None,
        qsl_running: None,
        gap_sq_over_n: None,
        gap_cross_over_n: None,
        max_v_over_g: None,
        normalized_design: None,
    };

    if cfg.has(Check::Rate) {
        let first = (p as u32 + 1).max(n.saturating_sub(cfg.tolerances.rate_window.max(1) - 1));
        for point in estimate_path(&sample, n)?.into_iter().filter(|pt| pt.n >= first) {
            let size = tree_size(point.n - 1) as f64;
            let err = (&point.theta_hat - &ctx.theta).norm_squared();
            record.rate.push((point.n, err * size / size.ln()));
        }
    }
    if ctx.needs_path && (cfg.has(Check::Qsl) || cfg.has(Check::Diagnostics)) {
        let diag = martingale_diagnostics(&sample, &cfg.params, &ctx.limits, n)?;
        let last = diag.generations.len() - 1;
        record.theta_qsl = Some(diag.theta_qsl[last]);
        record.qsl_running = Some(diag.qsl_running[last]);
        record.gap_sq_over_n = Some(diag.resid_gap_sq[last] / f64::from(n));
        record.gap_cross_over_n = Some(diag.resid_gap_cross[last] / f64::from(n));
        let max_v = diag
            .generations
            .iter()
            .zip(&diag.v)
            .zip(&diag.ridged)
            .filter(|(_, &r)| !r)
            .fold(0.0f64, |m, ((&g, &v), _)| m.max(v / f64::from(g)));
        record.max_v_over_g = Some(max_v);
    }
    if cfg.has(Check::LimitBridge) {
        record.normalized_design = Some(normalized_design(&sample, n).iter().copied().collect::<Vec<_>>());
    }
    Ok(record)
}

/// `S_n / |T_n|` with `S_n` summed over `T_{n, p-1}`.
pub fn normalized_design(sample: &TreeSample, n: u32) -> DMatrix<f64> {
    let p = sample.p;
    let mut s = DMatrix::<f64>::zeros(p + 1, p + 1);
    let mut y = DVector::<f64>::zeros(p + 1);
    for k in mother_range(i64::from(n), p as u32) {
        y[0] = 1.0;
        sample.fill_regressor_unchecked(k, &mut y.as_mut_slice()[1..]);
        s.ger(1.0, &y, &y, 1.0);
    }
    s / tree_size(n) as f64
}

/// Runs every replicate on the current rayon pool and evaluates the checks.
pub fn run_experiment(config: &ExperimentConfig) -> Result<VerificationReport> {
    let started = Instant::now();
    config.validate()?;
    let report = is_stable(&config.params)?;
    if !report.stable {
        return Err(BarError::Instability(format!(
            "companion matrices fail the contraction check (best joint bound {:.6})",
            report.joint_bound()
        )));
    }
    let moments = config.noise.theoretical_moments()?;
    let limits = assemble(&config.params, &moments)?;
    let ctx = Context {
        config,
        theta: config.params.theta_vec(),
        needs_path: config.checks.iter().any(|c| c.needs_path()),
        limits,
    };

    let results: Vec<Result<ReplicateRecord>> =
        (0..config.replicates).into_par_iter().map(|i| run_replicate(&ctx, i)).collect();
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut checks: Vec<Check> = config.checks.clone();
    checks.sort();
    checks.dedup();
    let reports = checks
        .into_iter()
        .map(|c| evaluate(c, &ctx, &moments, &records))
        .collect::<Result<Vec<_>>>()?;

    Ok(VerificationReport {
        p: config.params.p,
        n_generations: config.n_generations,
        replicates: config.replicates,
        master_seed: config.master_seed,
        checks: reports,
        seeds: records.iter().map(|r| r.seed).collect(),
        runtime_seconds: started.elapsed().as_secs_f64(),
        records,
    })
}

/// [`run_experiment`] on a dedicated pool of `jobs` threads.
pub fn run_experiment_with_jobs(config: &ExperimentConfig, jobs: usize) -> Result<VerificationReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BarError::Consistency(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_experiment(config))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values.iter().copied());
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn verdict_of(stats: &[Statistic]) -> Verdict {
    if stats.iter().all(|s| s.pass) {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn evaluate(
    check: Check,
    ctx: &Context<'_>,
    moments: &NoiseMoments,
    records: &[ReplicateRecord],
) -> Result<CheckReport> {
    let cfg = ctx.config;
    let tol = &cfg.tolerances;
    let p = cfg.params.p;
    let n = cfg.n_generations;
    let scale = tree_size(n - 1) as f64;
    let qsl_target = 2.0 * (p + 1) as f64 * moments.sigma2;

    if check.is_distributional() && records.len() < 2 {
        let first = &records[0];
        let statistics = match check {
            Check::CltSigma => vec![point("sigma2_hat", first.sigma2_hat, moments.sigma2)],
            Check::CltRho => vec![point("rho_hat", first.rho_hat, moments.rho)],
            _ => first
                .theta_hat
                .iter()
                .zip(ctx.theta.iter())
                .enumerate()
                .map(|(i, (&v, &t))| point(format!("theta_hat[{i}]"), v, t))
                .collect(),
        };
        return Ok(CheckReport {
            check,
            verdict: Verdict::InsufficientReplicates,
            statistics,
            note: Some("insufficient replicates for a distributional check".into()),
        });
    }

    let mut note = None;
    let statistics = match check {
        Check::Rate => {
            let window: Vec<u32> = records[0].rate.iter().map(|&(g, _)| g).collect();
            let medians: Vec<f64> = (0..window.len())
                .map(|i| median(&mut records.iter().map(|r| r.rate[i].1).collect::<Vec<_>>()))
                .collect();
            let mut stats: Vec<Statistic> = window
                .iter()
                .zip(&medians)
                .map(|(g, &m)| Statistic::at_most(format!("median_rate[n={g}]"), m, tol.rate_constant))
                .collect();
            let growing = medians.len() >= 2 && medians.windows(2).all(|w| w[1] > w[0]);
            stats.push(Statistic {
                name: "monotone_growth".into(),
                value: if growing { 1.0 } else { 0.0 },
                target: 0.0,
                tolerance: 0.0,
                pass: !growing,
            });
            stats
        }
        Check::Qsl => vec![
            Statistic::relative(
                "mean_theta_qsl",
                mean(records.iter().filter_map(|r| r.theta_qsl)),
                qsl_target,
                tol.qsl_rel,
            ),
            Statistic::relative(
                "mean_martingale_qsl",
                mean(records.iter().filter_map(|r| r.qsl_running)),
                qsl_target,
                tol.qsl_rel,
            ),
        ],
        Check::CltTheta => {
            let chol = ctx
                .limits
                .theta_cov
                .clone()
                .cholesky()
                .ok_or_else(|| BarError::domain("asymptotic covariance is not positive definite"))?;
            let dim = ctx.theta.len();
            let standardized: Vec<DVector<f64>> = records
                .iter()
                .map(|r| {
                    let err = (DVector::from_column_slice(&r.theta_hat) - &ctx.theta) * scale.sqrt();
                    chol.l().solve_lower_triangular(&err).expect("triangular factor is invertible")
                })
                .collect();
            let mut stats: Vec<Statistic> = (0..dim)
                .map(|i| {
                    let coord: Vec<f64> = standardized.iter().map(|w| w[i]).collect();
                    Statistic::at_most(format!("ks[{i}]"), ks_statistic(&coord, normal_cdf), tol.ks_max)
                })
                .collect();
            let r = standardized.len() as f64;
            let centre = standardized.iter().fold(DVector::zeros(dim), |acc, w| acc + w) / r;
            let cov = standardized.iter().fold(DMatrix::zeros(dim, dim), |acc, w| {
                let c = w - &centre;
                acc + &c * c.transpose()
            }) / (r - 1.0);
            let id = DMatrix::<f64>::identity(dim, dim);
            let rel = (cov - &id).norm() / id.norm();
            stats.push(Statistic::at_most("cov_rel_frobenius", rel, tol.cov_rel_frobenius));
            stats
        }
        Check::CltSigma => {
            let v: Vec<f64> = records.iter().map(|r| scale.sqrt() * (r.sigma2_hat - moments.sigma2)).collect();
            vec![Statistic::relative(
                "var_sqrt_n_sigma2",
                sample_variance(&v),
                ctx.limits.sigma2_clt_var,
                tol.clt_var_rel,
            )]
        }
        Check::CltRho => {
            let v: Vec<f64> = records.iter().map(|r| scale.sqrt() * (r.rho_hat - moments.rho)).collect();
            vec![Statistic::relative("var_sqrt_n_rho", sample_variance(&v), ctx.limits.rho_clt_var, tol.clt_var_rel)]
        }
        Check::LimitBridge => {
            let l = &ctx.limits.big_l;
            let d = l.nrows();
            let mut stats = Vec::new();
            for i in 0..d {
                for j in i..d {
                    let m = mean(records.iter().filter_map(|r| r.normalized_design.as_ref().map(|s| s[i * d + j])));
                    let target = l[(i, j)];
                    let denom = if target.abs() > 1e-12 * (l[(i, i)] * l[(j, j)]).sqrt() {
                        target.abs()
                    } else {
                        (l[(i, i)] * l[(j, j)]).sqrt()
                    };
                    stats.push(Statistic {
                        name: format!("S_n/|T_n|[{i},{j}]"),
                        value: m,
                        target,
                        tolerance: tol.bridge_rel,
                        pass: (m - target).abs() <= tol.bridge_rel * denom,
                    });
                }
            }
            stats
        }
        Check::Diagnostics => {
            let cross_target = (p + 1) as f64 * moments.rho;
            let cross_value = mean(records.iter().filter_map(|r| r.gap_cross_over_n));
            let cross_scale = if cross_target.abs() > 1e-12 { cross_target.abs() } else { (p + 1) as f64 * moments.sigma2 };
            let bound = tol.v_growth_multiple * (p + 1) as f64 * moments.sigma2;
            let within = records.iter().filter(|r| r.max_v_over_g.is_some_and(|v| v <= bound)).count();
            let fraction = within as f64 / records.len() as f64;
            note = Some(format!("V_g/g bound {bound}"));
            vec![
                Statistic::relative(
                    "mean_resid_gap_sq_over_n",
                    mean(records.iter().filter_map(|r| r.gap_sq_over_n)),
                    qsl_target,
                    tol.diagnostics_rel,
                ),
                Statistic {
                    name: "mean_resid_gap_cross_over_n".into(),
                    value: cross_value,
                    target: cross_target,
                    tolerance: tol.diagnostics_rel,
                    pass: (cross_value - cross_target).abs() <= tol.diagnostics_rel * cross_scale,
                },
                Statistic {
                    name: "fraction_v_over_g_bounded".into(),
                    value: fraction,
                    target: tol.v_growth_fraction,
                    tolerance: 0.0,
                    pass: fraction >= tol.v_growth_fraction,
                },
            ]
        }
    };
    Ok(CheckReport { check, verdict: verdict_of(&statistics), statistics, note })
}

fn point(name: impl Into<String>, value: f64, target: f64) -> Statistic {
    Statistic { name: name.into(), value, target, tolerance: 0.0, pass: true }
}
