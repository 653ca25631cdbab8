//! The FiMMIA detector: loss-difference calibration, triplet construction,
//! training and the averaged leakage score.

mod adafactor;
mod checkpoint;
mod net;
mod train;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::SignalRecord;

pub use adafactor::{adafactor_step, beta2, AdafactorState};
pub use checkpoint::Checkpoint;
pub use net::{layer_shapes, prob_one, AttackNet, Grads, Linear, Mode, DROPOUT, ENCODER_WIDTHS, PROJECTION};
pub use train::{train_attack_model, train_from, TrainConfig, TrainOutcome};

/// Default per-sample decision threshold on A.
pub const LEAK_THRESHOLD: f64 = 0.5;
/// Dataset-level flag: more than this fraction of samples scored as leaked.
pub const DATASET_LEAK_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("need at least two loss differences to calibrate, got {0}")]
    TooFewDiffs(usize),
    #[error("loss differences have zero variance; calibration is degenerate")]
    ZeroVariance,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    Mismatch(String),
    #[error("training set needs both labels")]
    SingleLabel,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no scores")]
    NoScores,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// z-score calibration of loss differences for one (dataset, model).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mu: f64,
    pub sigma: f64,
}

impl Normalizer {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, AttackError> {
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(AttackError::NonFinite("normalizer"));
        }
        if sigma <= 0.0 {
            return Err(AttackError::ZeroVariance);
        }
        Ok(Self { mu, sigma })
    }

    /// Mean and population standard deviation.
    pub fn fit(diffs: &[f64]) -> Result<Self, AttackError> {
        if diffs.len() < 2 {
            return Err(AttackError::TooFewDiffs(diffs.len()));
        }
        let n = diffs.len() as f64;
        let mu = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n;
        if var <= 0.0 || var.sqrt() <= 1e-12 * mu.abs() {
            return Err(AttackError::ZeroVariance);
        }
        Self::new(mu, var.sqrt())
    }

    pub fn apply(&self, dl: f64) -> f64 {
        (dl - self.mu) / self.sigma
    }
}

/// Every `L - L'_k` across the given records.
pub fn loss_diffs<'a>(records: impl IntoIterator<Item = &'a SignalRecord>) -> Vec<f64> {
    records
        .into_iter()
        .flat_map(|r| r.neighbor_losses.iter().map(move |l| r.loss - l))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackTriplet {
    pub loss_diff_norm: f64,
    pub emb_diff: Vec<f64>,
    /// 1 when the signal came from the leaked model.
    pub label: u8,
}

fn features<'a>(rec: &'a SignalRecord, norm: &Normalizer) -> impl Iterator<Item = (f64, Vec<f64>)> + 'a {
    let norm = *norm;
    rec.neighbor_losses
        .iter()
        .zip(&rec.neighbor_embeddings)
        .map(move |(l, e)| {
            let de = rec.embedding.iter().zip(e).map(|(a, b)| a - b).collect();
            (norm.apply(rec.loss - l), de)
        })
}

/// Two triplets per neighbor: label 0 from the clean model and label 1
/// from the leaked model, each calibrated by its own normalizer.
pub fn build_triplets(
    clean: &SignalRecord,
    leak: &SignalRecord,
    norm_clean: &Normalizer,
    norm_leak: &Normalizer,
) -> Result<Vec<AttackTriplet>, AttackError> {
    if clean.sample_id != leak.sample_id {
        return Err(AttackError::Mismatch(format!(
            "sample ids differ: `{}` vs `{}`",
            clean.sample_id, leak.sample_id
        )));
    }
    if clean.k() != leak.k() {
        return Err(AttackError::Mismatch(format!(
            "`{}` has {} neighbors under the clean model and {} under the leaked one",
            clean.sample_id,
            clean.k(),
            leak.k()
        )));
    }
    let mut out = Vec::with_capacity(2 * clean.k());
    for (rec, norm, label) in [(clean, norm_clean, 0u8), (leak, norm_leak, 1u8)] {
        for (dl, de) in features(rec, norm) {
            out.push(AttackTriplet {
                loss_diff_norm: dl,
                emb_diff: de,
                label,
            });
        }
    }
    Ok(out)
}

/// Mean detector probability over the sample's neighbors.
pub fn score_sample(net: &AttackNet, rec: &SignalRecord, norm: &Normalizer) -> Result<f64, AttackError> {
    if rec.k() == 0 {
        return Err(AttackError::NoScores);
    }
    let (dl, de): (Vec<f64>, Vec<Vec<f64>>) = features(rec, norm).unzip();
    let rows = Array2::from_shape_vec((de.len(), net.embedding_dim), de.concat())
        .map_err(|_| AttackError::Dimension {
            expected: net.embedding_dim,
            got: rec.embedding_dim(),
        })?;
    let p = net.predict(&dl, rows.view())?;
    Ok(p.iter().sum::<f64>() / p.len() as f64)
}

pub fn score_records(net: &AttackNet, records: &[SignalRecord], norm: &Normalizer) -> Result<Vec<f64>, AttackError> {
    records.par_iter().map(|r| score_sample(net, r, norm)).collect()
}

/// Fraction of scores strictly above `threshold`.
pub fn leak_fraction(scores: &[f64], threshold: f64) -> Result<f64, AttackError> {
    if scores.is_empty() {
        return Err(AttackError::NoScores);
    }
    Ok(scores.iter().filter(|&&s| s > threshold).count() as f64 / scores.len() as f64)
}
