//! Model-free feature extraction for the blind distribution-shift baseline.
//!
//! Nothing in here talks to a backend: every vector is a deterministic
//! function of the dataset files alone.

pub mod audio;
pub mod image;
mod matrix;
pub mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audio::{AudioClip, AudioFeatureConfig};
pub use image::{GrayImage, ImageFeatureConfig, RgbImage};
pub use matrix::FeatureMatrix;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {width}x{height} smaller than the required {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("DCT block {0} exceeds 64")]
    BlockTooLarge(usize),
    #[error("clip has {samples} samples, shorter than one {n_fft}-sample frame")]
    ClipTooShort { samples: usize, n_fft: usize },
    #[error("empty audio clip")]
    EmptyClip,
    #[error("descriptor dimension {got} does not match codebook dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("feature matrix: {0}")]
    Matrix(String),
    #[error("{0}")]
    Unsupported(String),
}

/// Fixed-length, finite feature vector tagged with the extractor configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub schema_id: String,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, schema_id: impl Into<String>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite feature");
        Self {
            values,
            schema_id: schema_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Concatenates parts; schema ids are joined with `+`.
    pub fn concat(parts: &[FeatureVector]) -> Self {
        Self {
            values: parts.iter().flat_map(|p| p.values.iter().copied()).collect(),
            schema_id: parts
                .iter()
                .map(|p| p.schema_id.as_str())
                .collect::<Vec<_>>()
                .join("+"),
        }
    }
}

/// Divides by the sum; all-zero input stays all-zero.
pub(crate) fn l1_normalize(values: &mut [f64]) {
    let s: f64 = values.iter().sum();
    if s > 0.0 {
        values.iter_mut().for_each(|v| *v /= s);
    }
}

pub(crate) fn l2_normalize(values: &mut [f64]) {
    let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 1e-12 {
        values.iter_mut().for_each(|v| *v /= n);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Orthonormal type-II DCT matrix, row `k` holding basis function `k`.
pub(crate) fn dct_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|i| {
                    scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
                })
                .collect()
        })
        .collect()
}
