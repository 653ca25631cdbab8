use serde::{Deserialize, Serialize};

use super::ShallowError;

/// Per-feature z-scoring; zero-variance features are dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub dim: usize,
    /// `(feature index, mean, std)` for each retained feature.
    pub kept: Vec<(usize, f64, f64)>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut kept = Vec::new();
        for j in 0..dim {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 1e-12 * (1.0 + mean.abs()) {
                kept.push((j, mean, std));
            }
        }
        Self { dim, kept }
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>, ShallowError> {
        if x.len() != self.dim {
            return Err(ShallowError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.kept.iter().map(|&(j, m, s)| (x[j] - m) / s).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            epochs: 300,
            lr: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    /// One weight per retained (standardized) feature.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardizer: Standardizer,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean logistic loss plus `l2/2 * |w|^2` on already-standardized rows,
/// with its gradient `(dL/dw, dL/db)`.
pub fn loss_grad(w: &[f64], b: f64, xs: &[Vec<f64>], y: &[bool], l2: f64) -> (f64, Vec<f64>, f64) {
    let n = xs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &label) in xs.iter().zip(y) {
        let z = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        let t = if label { 1.0 } else { 0.0 };
        // -[t ln s(z) + (1-t) ln(1 - s(z))] = softplus(z) - t z
        loss += softplus(z) - t * z;
        let r = sigmoid(z) - t;
        gb += r;
        for (g, c) in gw.iter_mut().zip(x) {
            *g += r * c;
        }
    }
    loss /= n;
    gb /= n;
    let mut reg = 0.0;
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
        reg += wi * wi;
    }
    (loss + 0.5 * l2 * reg, gw, gb)
}

/// Full-batch gradient descent from zero weights on standardized features.
pub fn logreg_fit(rows: &[Vec<f64>], y: &[bool], cfg: &LogRegConfig) -> Result<LogRegModel, ShallowError> {
    if rows.len() != y.len() {
        return Err(ShallowError::LengthMismatch {
            features: rows.len(),
            labels: y.len(),
        });
    }
    if rows.len() < 2 || y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(ShallowError::SingleClass);
    }
    let standardizer = Standardizer::fit(rows);
    let xs = rows
        .iter()
        .map(|r| standardizer.transform(r))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = vec![0.0; standardizer.kept.len()];
    let mut b = 0.0;
    for _ in 0..cfg.epochs {
        let (_, gw, gb) = loss_grad(&w, b, &xs, y, cfg.l2);
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g;
        }
        b -= cfg.lr * gb;
    }
    Ok(LogRegModel {
        weights: w,
        bias: b,
        standardizer,
    })
}

impl LogRegModel {
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, ShallowError> {
        let z = self.standardizer.transform(x)?;
        Ok(sigmoid(self.bias + self.weights.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn random_problem(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut r = Prng::new(seed);
        let xs = (0..n).map(|_| (0..d).map(|_| r.normal()).collect()).collect();
        let y = (0..n).map(|_| r.bernoulli(0.5)).collect();
        (xs, y)
    }

    #[test]
    fn zero_epochs_predicts_half() {
        let (xs, y) = random_problem(20, 3, 1);
        let m = logreg_fit(&xs, &y, &LogRegConfig { epochs: 0, ..Default::default() }).unwrap();
        for x in &xs {
            assert_eq!(m.predict_proba(x).unwrap(), 0.5);
        }
    }

    #[test]
    fn separable_1d_reaches_full_accuracy() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 - 19.5]).collect();
        let y: Vec<bool> = xs.iter().map(|x| x[0] > 0.0).collect();
        let cfg = LogRegConfig { l2: 0.0, epochs: 2000, lr: 1.0 };
        let m = logreg_fit(&xs, &y, &cfg).unwrap();
        for (x, &t) in xs.iter().zip(&y) {
            assert_eq!(m.predict_proba(x).unwrap() > 0.5, t);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut r = Prng::new(77);
        for draw in 0..50 {
            let (xs, y) = random_problem(15, 4, 100 + draw);
            let w: Vec<f64> = (0..4).map(|_| r.normal()).collect();
            let b = r.normal();
            let (_, gw, gb) = loss_grad(&w, b, &xs, &y, 0.1);
            let h = 1e-5;
            for j in 0..4 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let num = (loss_grad(&wp, b, &xs, &y, 0.1).0 - loss_grad(&wm, b, &xs, &y, 0.1).0) / (2.0 * h);
                assert!((num - gw[j]).abs() <= 1e-6 * num.abs().max(gw[j].abs()).max(1e-3));
            }
            let num = (loss_grad(&w, b + h, &xs, &y, 0.1).0 - loss_grad(&w, b - h, &xs, &y, 0.1).0) / (2.0 * h);
            assert!((num - gb).abs() <= 1e-6 * num.abs().max(gb.abs()).max(1e-3));
        }
    }

    #[test]
    fn predict_matches_direct_formula() {
        let (xs, y) = random_problem(30, 3, 4);
        let m = logreg_fit(&xs, &y, &LogRegConfig::default()).unwrap();
        for x in &xs {
            let mut z = m.bias;
            for (k, &(j, mu, sd)) in m.standardizer.kept.iter().enumerate() {
                z += m.weights[k] * (x[j] - mu) / sd;
            }
            let direct = 1.0 / (1.0 + (-z).exp());
            assert!((m.predict_proba(x).unwrap() - direct).abs() <= 1e-12);
        }
        assert!(m.predict_proba(&[1.0]).is_err());
    }

    #[test]
    fn bias_drives_probability_monotonically_to_one() {
        let (xs, y) = random_problem(10, 2, 8);
        let mut m = logreg_fit(&xs, &y, &LogRegConfig::default()).unwrap();
        let mut last = 0.0;
        for b in [-5.0, 0.0, 5.0, 20.0, 40.0] {
            m.bias = b;
            let p = m.predict_proba(&xs[0]).unwrap();
            assert!(p > last);
            last = p;
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn loss_decreases_with_small_steps() {
        let (xs, y) = random_problem(50, 3, 12);
        let mut w = vec![0.0; 3];
        let mut b = 0.0;
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let (l, gw, gb) = loss_grad(&w, b, &xs, &y, 0.01);
            assert!(l < prev);
            prev = l;
            w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= 0.1 * g);
            b -= 0.1 * gb;
        }
    }

    #[test]
    fn zero_variance_features_are_dropped() {
        let xs = vec![vec![1.0, 3.0], vec![1.0, 5.0], vec![1.0, 4.0]];
        let s = Standardizer::fit(&xs);
        assert_eq!(s.kept.len(), 1);
        assert_eq!(s.kept[0].0, 1);
        assert!(matches!(
            logreg_fit(&xs, &[true, true, true], &LogRegConfig::default()),
            Err(ShallowError::SingleClass)
        ));
    }
}
