use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{logreg_fit, LogRegConfig, ShallowError};
use crate::metrics::{auc_roc, ScoredSet};
use crate::rng::Prng;

/// Cross-validated blind-baseline score. `std_auc` is the population
/// standard deviation across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub dataset: String,
    pub schema_id: String,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

/// Fold index per sample. Each class is shuffled separately and dealt
/// round-robin, so per-fold class counts differ by at most one.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Result<Vec<usize>, ShallowError> {
    let mut out = vec![0; labels.len()];
    for (class, name) in [(true, "member"), (false, "nonmember")] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < folds {
            return Err(ShallowError::ClassTooSmall {
                class: name,
                count: idx.len(),
                folds,
            });
        }
        Prng::derived(seed, &[b"fold", name.as_bytes()]).shuffle(&mut idx);
        for (pos, i) in idx.into_iter().enumerate() {
            out[i] = pos % folds;
        }
    }
    Ok(out)
}

/// Trains on `folds - 1` folds and scores the held-out fold, for every fold.
pub fn cross_validated_auc(
    rows: &[Vec<f64>],
    labels: &[bool],
    folds: usize,
    seed: u64,
    cfg: &LogRegConfig,
) -> Result<BaselineReport, ShallowError> {
    cross_validated_scores(rows, labels, folds, seed, cfg).map(|(r, _)| r)
}

/// As [`cross_validated_auc`], also returning each sample's out-of-fold
/// membership probability.
pub fn cross_validated_scores(
    rows: &[Vec<f64>],
    labels: &[bool],
    folds: usize,
    seed: u64,
    cfg: &LogRegConfig,
) -> Result<(BaselineReport, Vec<f64>), ShallowError> {
    if rows.len() != labels.len() {
        return Err(ShallowError::LengthMismatch {
            features: rows.len(),
            labels: labels.len(),
        });
    }
    let assignment = stratified_folds(labels, folds, seed)?;
    let per_fold = (0..folds)
        .into_par_iter()
        .map(|f| {
            let (mut train_x, mut train_y, mut test_i) = (vec![], vec![], vec![]);
            for (i, ((row, &label), &a)) in rows.iter().zip(labels).zip(&assignment).enumerate() {
                if a == f {
                    test_i.push(i);
                } else {
                    train_x.push(row.clone());
                    train_y.push(label);
                }
            }
            let model = logreg_fit(&train_x, &train_y, cfg)?;
            let scores = test_i
                .iter()
                .map(|&i| model.predict_proba(&rows[i]))
                .collect::<Result<Vec<_>, _>>()?;
            let test_y = test_i.iter().map(|&i| labels[i]).collect();
            let auc = auc_roc(&ScoredSet::new(scores.clone(), test_y)?)?;
            Ok((auc, test_i, scores))
        })
        .collect::<Result<Vec<_>, ShallowError>>()?;
    let mut oof = vec![0.0; rows.len()];
    let mut fold_aucs = Vec::with_capacity(folds);
    for (auc, idx, scores) in per_fold {
        fold_aucs.push(auc);
        idx.into_iter().zip(scores).for_each(|(i, s)| oof[i] = s);
    }
    let mean_auc = fold_aucs.iter().sum::<f64>() / folds as f64;
    let std_auc = (fold_aucs.iter().map(|a| (a - mean_auc).powi(2)).sum::<f64>() / folds as f64).sqrt();
    let n_members = labels.iter().filter(|&&l| l).count();
    let report = BaselineReport {
        dataset: String::new(),
        schema_id: String::new(),
        fold_aucs,
        mean_auc,
        std_auc,
        n_members,
        n_nonmembers: labels.len() - n_members,
    };
    Ok((report, oof))
}
