//! Post-hoc out-of-distribution detection on pre-extracted network features.
//!
//! The crate fits class-conditional Gaussians to labeled training features
//! ([`gaussian`]), scores test features with Mahalanobis, Mahalanobis++
//! (Mahalanobis on l2-normalized features), relative Mahalanobis and a set of
//! logit- and neighbor-based baselines ([`scorers`]), evaluates score vectors
//! with FPR at a fixed TPR and AUROC ([`metrics`]), and audits how Gaussian the
//! features actually are ([`diagnostics`]). [`synth`] generates controlled
//! synthetic datasets and holds naive reference implementations used by the
//! test suite. [`npy`], [`bundle`], [`report`] and [`eval`] cover file formats
//! and end-to-end evaluation runs.
//!
//! Scores follow one convention everywhere: larger means more in-distribution.

pub mod bundle;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod matrix;
pub mod metrics;
pub mod npy;
pub mod report;
pub mod rng;
pub mod scorers;
pub mod special;
mod stats;
pub mod synth;
pub mod threads;

pub use error::{Error, Result};
pub use gaussian::{fit, l2_normalize, Center, GaussianFit, PerClassCovariances, Shrinkage};
pub use matrix::{FeatureMatrix, Labels, RowMatrix};
pub use scorers::{Method, ModelHead, ScoreVector, ScorerConfig};

/// Toolkit version recorded in reports and fit files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
