//! AUC-ROC and TPR at a fixed FPR.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Operating point used throughout the reports.
pub const DEFAULT_FPR: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("both classes must be present ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("fpr {0} outside (0, 1)")]
    BadFpr(f64),
}

/// Scores with binary labels, `true` meaning member / leaked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(MetricError::NonFinite(bad));
        }
        Ok(Self { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    fn require_both(&self) -> Result<(usize, usize), MetricError> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(MetricError::SingleClass {
                positives: p,
                negatives: n,
            });
        }
        Ok((p, n))
    }

    /// Groups of equal scores, ascending: `(positives, negatives)` per group.
    fn tie_groups(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut last = None;
        for i in idx {
            if last != Some(self.scores[i]) {
                groups.push((0, 0));
                last = Some(self.scores[i]);
            }
            let g = groups.last_mut().expect("pushed above");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. O(n log n).
pub fn auc_roc(set: &ScoredSet) -> Result<f64, MetricError> {
    let (p, n) = set.require_both()?;
    let mut neg_below = 0usize;
    // twice the U statistic, kept integral
    let mut twice_u = 0u128;
    for (pos, neg) in set.tie_groups() {
        twice_u += (pos as u128) * (2 * neg_below as u128 + neg as u128);
        neg_below += neg;
    }
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// Largest TPR among thresholds `score >= t` whose empirical FPR does not
/// exceed `fpr`. Step convention, no interpolation between ROC points.
pub fn tpr_at_fpr(set: &ScoredSet, fpr: f64) -> Result<f64, MetricError> {
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(MetricError::BadFpr(fpr));
    }
    let (p, n) = set.require_both()?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    for (pos, neg) in set.tie_groups().into_iter().rev() {
        tp += pos;
        fp += neg;
        if fp as f64 / n as f64 <= fpr {
            best = best.max(tp as f64 / p as f64);
        } else {
            break;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use proptest::prelude::*;

    fn set(scores: &[f64], labels: &[bool]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    fn brute_auc(s: &ScoredSet) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.scores.len() {
            for j in 0..s.scores.len() {
                if s.labels[i] && !s.labels[j] {
                    pairs += 1.0;
                    if s.scores[i] > s.scores[j] {
                        acc += 1.0;
                    } else if s.scores[i] == s.scores[j] {
                        acc += 0.5;
                    }
                }
            }
        }
        acc / pairs
    }

    fn brute_tpr(s: &ScoredSet, fpr: f64) -> f64 {
        let p = s.positives() as f64;
        let n = s.negatives() as f64;
        let mut thresholds = s.scores.clone();
        thresholds.push(f64::INFINITY);
        thresholds
            .iter()
            .filter_map(|&t| {
                let fp = (0..s.scores.len()).filter(|&i| !s.labels[i] && s.scores[i] >= t).count();
                let tp = (0..s.scores.len()).filter(|&i| s.labels[i] && s.scores[i] >= t).count();
                (fp as f64 / n <= fpr).then_some(tp as f64 / p)
            })
            .fold(0.0, f64::max)
    }

    fn random_set(rng: &mut Prng, n: usize, levels: usize) -> ScoredSet {
        loop {
            let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
            let s = set(&scores, &labels);
            if s.positives() > 0 && s.negatives() > 0 {
                return s;
            }
        }
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert_eq!(auc_roc(&s).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&s, 0.05).unwrap(), 1.0);
    }

    #[test]
    fn flipping_labels_complements_auc() {
        let mut rng = Prng::new(4);
        let s = random_set(&mut rng, 50, 10);
        let flipped = set(&s.scores, &s.labels.iter().map(|l| !l).collect::<Vec<_>>());
        let a = auc_roc(&s).unwrap();
        assert!((auc_roc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn all_ties_is_half() {
        let s = set(&[0.3; 6], &[true, false, true, false, false, true]);
        assert_eq!(auc_roc(&s).unwrap(), 0.5);
        // no admissible threshold below fpr=1 other than +inf
        assert_eq!(tpr_at_fpr(&s, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn tiny_fpr_with_overlap_is_zero() {
        let s = set(&[0.9, 0.5, 0.4, 0.1], &[false, true, false, true]);
        assert_eq!(tpr_at_fpr(&s, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            auc_roc(&set(&[0.1, 0.2], &[true, true])),
            Err(MetricError::SingleClass { .. })
        ));
        assert!(matches!(
            tpr_at_fpr(&set(&[0.1, 0.2], &[false, false]), 0.05),
            Err(MetricError::SingleClass { .. })
        ));
        assert!(ScoredSet::new(vec![0.1], vec![]).is_err());
        assert!(ScoredSet::new(vec![f64::NAN], vec![true]).is_err());
        assert!(tpr_at_fpr(&set(&[0.1, 0.2], &[true, false]), 0.0).is_err());
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut rng = Prng::new(77);
        for _ in 0..300 {
            let n = 2 + rng.below(199);
            let levels = 1 + rng.below(30);
            let s = random_set(&mut rng, n, levels);
            assert!((auc_roc(&s).unwrap() - brute_auc(&s)).abs() <= 1e-12);
            for fpr in [0.01, 0.05, 0.2, 0.5] {
                assert_eq!(tpr_at_fpr(&s, fpr).unwrap(), brute_tpr(&s, fpr));
            }
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(seed: u64, n in 2usize..100) {
            let mut rng = Prng::new(seed);
            let s = random_set(&mut rng, n, 1000);
            let t = set(&s.scores.iter().map(|x| (3.0 * x).exp() - 7.0).collect::<Vec<_>>(), &s.labels);
            prop_assert!((auc_roc(&s).unwrap() - auc_roc(&t).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn tpr_monotone_in_fpr(seed: u64, n in 2usize..100) {
            let mut rng = Prng::new(seed);
            let s = random_set(&mut rng, n, 20);
            let mut prev = 0.0;
            for k in 1..20 {
                let v = tpr_at_fpr(&s, k as f64 / 20.0).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
        }

        #[test]
        fn metrics_permutation_invariant(seed: u64, n in 2usize..100) {
            let mut rng = Prng::new(seed);
            let s = random_set(&mut rng, n, 15);
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let p = set(&order.iter().map(|&i| s.scores[i]).collect::<Vec<_>>(),
                        &order.iter().map(|&i| s.labels[i]).collect::<Vec<_>>());
            prop_assert_eq!(auc_roc(&s).unwrap(), auc_roc(&p).unwrap());
            prop_assert_eq!(tpr_at_fpr(&s, 0.05).unwrap(), tpr_at_fpr(&p, 0.05).unwrap());
        }
    }
}
