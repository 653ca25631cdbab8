//! Seeded inputs shared by the benchmarks.

use fimmia::features::AudioClip;
use fimmia::metrics::ScoredSet;
use fimmia::rng::Prng;
use ndarray::Array2;

/// `n` scores with a mild class separation and some exact ties.
pub fn scored_set(n: usize, seed: u64) -> ScoredSet {
    let mut r = Prng::new(seed);
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let scores = labels
        .iter()
        .map(|&l| {
            let s = r.normal() + if l { 0.5 } else { 0.0 };
            (s * 100.0).round() / 100.0
        })
        .collect();
    ScoredSet::new(scores, labels).expect("two classes")
}

/// A 440 Hz tone with noise.
pub fn tone(seconds: f64, sample_rate: u32, seed: u64) -> AudioClip {
    let mut r = Prng::new(seed);
    let n = (seconds * f64::from(sample_rate)) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / f64::from(sample_rate);
            0.5 * (2.0 * std::f64::consts::PI * 440.0 * t).sin() + 0.05 * r.normal()
        })
        .collect();
    AudioClip::new(sample_rate, samples).expect("valid clip")
}

/// A detector batch: normalized loss gaps and embedding differences.
pub fn batch(rows: usize, dim: usize, seed: u64) -> (Vec<f64>, Array2<f64>) {
    let mut r = Prng::new(seed);
    let dl = (0..rows).map(|_| r.normal()).collect();
    let de = Array2::from_shape_simple_fn((rows, dim), || 0.1 * r.normal());
    (dl, de)
}
