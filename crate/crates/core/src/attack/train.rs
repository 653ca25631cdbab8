use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::adafactor::{adafactor_step, AdafactorState};
use super::net::{AttackNet, Mode};
use super::{AttackError, AttackTriplet};
use crate::rng::Prng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub seed: u64,
    pub final_relu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 2e-6,
            optimizer: "adafactor".into(),
            seed: 0,
            final_relu: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AttackError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AttackError::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.optimizer != "adafactor" {
            return Err(AttackError::Config(format!("unsupported optimizer `{}`", self.optimizer)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: AttackNet,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains a freshly initialized detector.
pub fn train_attack_model(triplets: &[AttackTriplet], cfg: &TrainConfig) -> Result<TrainOutcome, AttackError> {
    let dim = triplets.first().ok_or(AttackError::SingleLabel)?.emb_diff.len();
    let mut net = AttackNet::new(dim, cfg.seed)?;
    net.final_relu = cfg.final_relu;
    train_from(net, triplets, cfg)
}

/// Seeded per-epoch shuffle, mini-batches (last partial batch kept),
/// one Adafactor step per batch.
pub fn train_from(mut net: AttackNet, triplets: &[AttackTriplet], cfg: &TrainConfig) -> Result<TrainOutcome, AttackError> {
    cfg.validate()?;
    let has = |l: u8| triplets.iter().any(|t| t.label == l);
    if !has(0) || !has(1) {
        return Err(AttackError::SingleLabel);
    }
    let dim = net.embedding_dim;
    if let Some(bad) = triplets.iter().find(|t| t.emb_diff.len() != dim) {
        return Err(AttackError::Dimension {
            expected: dim,
            got: bad.emb_diff.len(),
        });
    }
    if triplets.iter().any(|t| !t.loss_diff_norm.is_finite() || t.emb_diff.iter().any(|v| !v.is_finite())) {
        return Err(AttackError::NonFinite("training triplets"));
    }

    let mut state = AdafactorState::new(&net.layers);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    for epoch in 0..cfg.epochs {
        let tag = (epoch as u64).to_le_bytes();
        Prng::derived(cfg.seed, &[b"epoch-shuffle", &tag]).shuffle(&mut order);
        let mut dropout = Prng::derived(cfg.seed, &[b"dropout", &tag]);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let dl: Vec<f64> = chunk.iter().map(|&i| triplets[i].loss_diff_norm).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| triplets[i].label).collect();
            let mut de = Array2::zeros((chunk.len(), dim));
            for (mut row, &i) in de.outer_iter_mut().zip(chunk) {
                row.iter_mut().zip(&triplets[i].emb_diff).for_each(|(r, v)| *r = *v);
            }
            let (loss, grads) = net.loss_grad(&dl, de.view(), &labels, Mode::Train(&mut dropout))?;
            adafactor_step(&mut net.layers, &grads, &mut state, cfg.lr)?;
            total += loss * chunk.len() as f64;
        }
        trace.push(total / triplets.len() as f64);
    }
    Ok(TrainOutcome { net, loss_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{auc_roc, ScoredSet};

    fn separable(n: usize, e: usize, seed: u64) -> Vec<AttackTriplet> {
        let mut r = Prng::new(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let centre = if label == 1 { -2.0 } else { 2.0 };
                AttackTriplet {
                    loss_diff_norm: centre + 0.5 * r.normal(),
                    emb_diff: (0..e).map(|_| 0.1 * r.normal()).collect(),
                    label,
                }
            })
            .collect()
    }

    fn auc_of(net: &AttackNet, t: &[AttackTriplet]) -> f64 {
        let scores: Vec<f64> = t
            .iter()
            .map(|x| net.forward(x.loss_diff_norm, &x.emb_diff, Mode::Eval).unwrap().1)
            .collect();
        auc_roc(&ScoredSet::new(scores, t.iter().map(|x| x.label == 1).collect()).unwrap()).unwrap()
    }

    #[test]
    fn training_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.lr, c.optimizer.as_str()), (10, 64, 2e-6, "adafactor"));
    }

    #[test]
    fn separable_triplets_are_learned() {
        let train = separable(2000, 8, 1);
        let test = separable(1000, 8, 2);
        let out = train_attack_model(&train, &TrainConfig::default()).unwrap();
        assert!((out.loss_trace[0] - std::f64::consts::LN_2).abs() <= 0.05, "{:?}", out.loss_trace);
        let auc = auc_of(&out.net, &test);
        assert!(auc >= 0.99, "held-out AUC {auc}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let t = separable(300, 4, 3);
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let a = train_attack_model(&t, &cfg).unwrap();
        let b = train_attack_model(&t, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn label_flip_mirrors_probabilities() {
        let t = separable(400, 4, 4);
        let flipped: Vec<AttackTriplet> = t
            .iter()
            .map(|x| AttackTriplet {
                label: 1 - x.label,
                ..x.clone()
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1e-3,
            ..Default::default()
        };
        let init = AttackNet::new(4, 11).unwrap();
        let a = train_from(init.clone(), &t, &cfg).unwrap().net;
        let b = train_from(init.mirrored(), &flipped, &cfg).unwrap().net;
        for x in t.iter().take(50) {
            let p = a.forward(x.loss_diff_norm, &x.emb_diff, Mode::Eval).unwrap().1;
            let q = b.forward(x.loss_diff_norm, &x.emb_diff, Mode::Eval).unwrap().1;
            assert!((p + q - 1.0).abs() <= 0.05, "{p} vs {q}");
        }
    }

    #[test]
    fn single_label_is_rejected() {
        let t: Vec<AttackTriplet> = separable(10, 2, 0).into_iter().filter(|x| x.label == 1).collect();
        assert!(matches!(
            train_attack_model(&t, &TrainConfig::default()),
            Err(AttackError::SingleLabel)
        ));
    }
}
