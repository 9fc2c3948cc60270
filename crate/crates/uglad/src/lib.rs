//! Sparse precision-matrix recovery with an unrolled, unsupervised
//! graphical-lasso network.
//!
//! Given samples assumed to come from a multivariate Gaussian, the library
//! estimates a sparse inverse covariance (the conditional-independence
//! graph) by training a small recurrent network — alternating-minimization
//! updates unrolled to a fixed depth, with the penalty constants replaced by
//! learned networks — against the penalized log-likelihood, without any
//! ground-truth supervision. Alongside the estimator it ships:
//!
//! - four training modes: direct, cross-validated epoch selection,
//!   multi-task joint recovery, and a missing-data consensus strategy
//!   ([`fit`]);
//! - a classical ADMM graphical-lasso baseline with penalty selection
//!   ([`baseline`]);
//! - a reproducible synthetic benchmark: sparse ground-truth generation,
//!   Gaussian sampling, dropout injection, and AUC/AUPR edge-ranking
//!   metrics ([`synth`], [`data`], [`metrics`]);
//! - the supporting numerics: dense SPD linear algebra ([`linalg`]) and a
//!   small reverse-mode autodiff tape ([`autodiff`]).
//!
//! The `examples/` directory contains one runnable example per capability;
//! the `uglad` binary exposes the same functionality as subcommands
//! (`simulate`, `fit`, `evaluate`, `compare`, `export-graph`).

pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod data;
pub mod fit;
pub mod glad;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod synth;

pub use data::Dataset;
pub use fit::{fit_cv, fit_direct, fit_missing, fit_multitask, FitConfig, FitMode, FitResult};
pub use glad::{glad_forward, GladParams, UnrollConfig};
pub use linalg::{Matrix, SpdMatrix};
pub use metrics::{aupr_auc, MetricReport};
pub use synth::{generate_precision, sample_mvn, GroundTruth};
