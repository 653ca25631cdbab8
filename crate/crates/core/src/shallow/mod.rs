//! Blind baseline: k-means codebooks, logistic regression and
//! stratified cross-validated AUC. Uses dataset features only.

mod cv;
mod kmeans;
mod logreg;

use thiserror::Error;

use crate::metrics::MetricError;

pub use cv::{cross_validated_auc, cross_validated_scores, stratified_folds, BaselineReport};
pub use kmeans::{kmeans_fit, Codebook, KMeansFit};
pub use logreg::{logreg_fit, loss_grad, LogRegConfig, LogRegModel, Standardizer};

#[derive(Debug, Error)]
pub enum ShallowError {
    #[error("{n} vectors cannot seed {k} clusters")]
    TooFewVectors { n: usize, k: usize },
    #[error("codebook needs at least one centroid of equal, non-zero dimension without NaN")]
    BadCodebook,
    #[error("both classes are required for training")]
    SingleClass,
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("class `{class}` has {count} samples, fewer than {folds} folds")]
    ClassTooSmall {
        class: &'static str,
        count: usize,
        folds: usize,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
