use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sq_dist, ShallowError};
use crate::rng::Prng;

/// Visual-word dictionary: `k` centroids of dimension `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    centroids: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self, ShallowError> {
        let d = centroids.first().map_or(0, Vec::len);
        if d == 0
            || centroids.iter().any(|c| c.len() != d)
            || centroids.iter().flatten().any(|v| v.is_nan())
        {
            return Err(ShallowError::BadCodebook);
        }
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Index of the closest centroid; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        self.nearest_with_dist(v).0
    }

    fn nearest_with_dist(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(c, v);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Sum of squared distances to the nearest centroid.
    pub fn inertia(&self, vectors: &[Vec<f64>]) -> f64 {
        vectors.par_iter().map(|v| self.nearest_with_dist(v).1).sum()
    }
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Inertia of each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().unwrap_or(&0.0)
    }
}

/// k-means++ seeding followed by Lloyd iterations until the assignment
/// stops changing or `max_iter` is reached.
pub fn kmeans_fit(vectors: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansFit, ShallowError> {
    if k == 0 || vectors.len() < k {
        return Err(ShallowError::TooFewVectors { n: vectors.len(), k });
    }
    let d = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
        return Err(ShallowError::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let mut rng = Prng::new(seed);
    let mut centroids = plus_plus(vectors, k, &mut rng);
    let mut assignment: Vec<usize> = vec![usize::MAX; vectors.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let cb = Codebook { centroids };
        let nearest: Vec<(usize, f64)> = vectors.par_iter().map(|v| cb.nearest_with_dist(v)).collect();
        centroids = cb.centroids;
        trace.push(nearest.iter().map(|n| n.1).sum());
        let changed = nearest.iter().zip(&assignment).any(|(n, a)| n.0 != *a);
        assignment = nearest.iter().map(|n| n.0).collect();
        if !changed || iterations == max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut dist: Vec<f64> = nearest.iter().map(|n| n.1).collect();
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // empty cluster: move to the point worst served by its centroid
                let far = (0..dist.len())
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("non-empty");
                centroids[c] = vectors[far].clone();
                dist[far] = 0.0;
            }
        }
    }
    Ok(KMeansFit {
        codebook: Codebook { centroids },
        inertia_trace: trace,
        iterations,
    })
}

fn plus_plus(vectors: &[Vec<f64>], k: usize, rng: &mut Prng) -> Vec<Vec<f64>> {
    let mut centroids = vec![vectors[rng.below(vectors.len())].clone()];
    let mut dist: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.unit() * total;
            let mut idx = dist.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            while dist[idx] == 0.0 {
                idx -= 1;
            }
            idx
        } else {
            // all remaining points coincide with a centroid
            rng.below(vectors.len())
        };
        let c = vectors[pick].clone();
        for (d, v) in dist.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, &c));
        }
        centroids.push(c);
    }
    centroids
}
