//! Asymmetric bifurcating autoregressive processes of order `p` on the
//! complete binary tree.
//!
//! Each cell `k` carries a trait `X_k`; its daughters `2k` and `2k+1` follow
//!
//! ```text
//! X_2k   = a_0 + a_1 X_k + a_2 X_{k/2} + .. + a_p X_{k/2^(p-1)} + eps_2k
//! X_2k+1 = b_0 + b_1 X_k + b_2 X_{k/2} + .. + b_p X_{k/2^(p-1)} + eps_2k+1
//! ```
//!
//! with sister noises that may be correlated. The crate simulates such trees,
//! fits the coefficients by least squares, estimates the noise variance and
//! sister covariance, computes the exact limits of the normalized design and
//! the asymptotic covariances, and runs seeded Monte Carlo checks of the
//! estimators' large-tree behaviour.
//!
//! Modules, bottom up: [`treeindex`], [`model`], [`noise`], [`simulate`],
//! [`estimate`], [`limits`], [`montecarlo`].

pub mod error;
pub mod estimate;
pub mod limits;
pub mod model;
pub mod montecarlo;
pub mod noise;
pub mod rng;
pub mod simulate;
pub mod treeindex;

pub use error::{BarError, Result};
pub use estimate::{
    estimate, ls_estimate, martingale_diagnostics, rank1_update, residual_moments, DesignState,
    EstimationResult, MartingaleDiagnostics, ThetaEstimate,
};
pub use limits::{assemble, ell_solve, lambda_limit, LimitDocument, LimitTheory};
pub use model::{companion_matrices, stability_report, BarParams, CompanionPair, StabilityReport};
pub use montecarlo::{
    derive_seed, normal_cdf, run_experiment, run_experiment_with_jobs, Check, ExperimentConfig,
    Tolerances, Verdict, VerificationReport,
};
pub use noise::{NoiseMoments, NoiseSpec};
pub use simulate::{simulate_tree, InitSpec, TreeSample};
pub use treeindex::{ancestor, generation_of, subtree_counts, Generation, NodeId};
