//! Latent-dimension extraction, oblique rotation, thresholding and projection.
//!
//! The similarity matrix is treated as a correlation matrix (unit diagonal).
//! Extraction is either PCA or iterated principal axis factoring; the loadings
//! are then Promax-rotated (varimax first) and the resulting pattern matrix Λ
//! and component correlations Φ make up a [`NetworkModel`].

mod extract;
mod model;
mod project;
mod rotate;

use thiserror::Error;

pub use extract::{extract_paf, extract_pca, sorted_eigen, ComponentRule, Extracted, PafOptions, PafResult};
pub use model::{fit_network, DimensionMeta, Extraction, FitOptions, ModelFlags, NetworkModel};
pub use project::{
    explained_variance, primary_assignments, project, threshold_loadings, Assignment, ExplainedVariance, Projector, ThresholdResult,
    DEFAULT_THRESHOLD, MAX_CONDITION,
};
pub use rotate::{promax, varimax, varimax_criterion, PromaxResult, VarimaxResult, DEFAULT_KAPPA};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("matrix is not square and symmetric")]
    NotSymmetric,
    #[error("requested {requested} components but only {available} positive eigenvalues")]
    InsufficientRank { requested: usize, available: usize },
    #[error("no component has eigenvalue above 1")]
    EmptyExtraction,
    #[error("component count must be at least 1")]
    ZeroComponents,
    #[error("Promax transformation is singular")]
    SingularRotation,
    #[error("loading cross-product is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("component correlation matrix is not positive definite")]
    PhiNotPositiveDefinite,
    #[error("similarity row has length {found}, network has {expected} indicators")]
    LengthMismatch { expected: usize, found: usize },
    #[error("threshold must be a positive finite number, got {0}")]
    InvalidThreshold(f64),
    #[error("invalid network model: {0}")]
    InvalidModel(String),
}
