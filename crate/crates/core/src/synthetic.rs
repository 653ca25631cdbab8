//! Deterministic stand-in models for exercising the audit pipeline without
//! a sidecar.
//!
//! Every served model returns a loss around [`BASE_LOSS`] with seeded
//! Gaussian noise. Models listed as leaked have memorized the dataset: the
//! memorized text of a payload and its close paraphrases sit in a loss well
//! of depth `delta`. A text at embedding distance `d` from the memorized one
//! is lowered by `delta * sigmoid((reach - d) / width)`, so the original is
//! lowered by about `delta` and neighbors farther than `reach` are not.
//!
//! A loss shift shared by all texts would be removed by per-model z-scoring;
//! the well makes the leaked model's loss differences depend on how far each
//! neighbor moved, which is what the detector can see.
//!
//! Embeddings come from a hashed unigram and bigram encoder shared by all
//! models, so they depend on the text only.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::backend::{hex_digest, BackendError, BackendInfo, ModelClient, Payload, LOSS_CONVENTION};
use crate::data::{DataError, DatasetManifest, Label, Modality, Sample};
use crate::perturb::{replace_sentinels, tokenize, FillBackend};
use crate::rng::{derive_seed, Prng};

pub const BASE_LOSS: f64 = 3.0;

const WORDS: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub models: Vec<String>,
    pub leaked: Vec<String>,
    /// Loss depression of a memorized original.
    pub delta: f64,
    /// Standard deviation of the per-text loss noise.
    pub noise: f64,
    /// Embedding distance at which the depression is halved.
    pub reach: f64,
    /// Steepness of the well edge.
    pub width: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            models: vec!["clean".into(), "leak".into()],
            leaked: vec!["leak".into()],
            delta: 1.0,
            noise: 0.3,
            reach: 0.5,
            width: 0.02,
            embedding_dim: 64,
            seed: 0,
        }
    }
}

/// Stub backend over a fixed set of memorized `(payload, text)` pairs.
#[derive(Clone, Debug)]
pub struct SyntheticModels {
    cfg: SyntheticConfig,
    /// Payload digest -> memorized text.
    memorized: HashMap<String, String>,
}

fn word(i: usize) -> String {
    const SYL: [&str; 12] = ["ka", "lo", "mi", "ra", "te", "su", "no", "vi", "de", "pa", "go", "ze"];
    let (a, b, c) = (i % 12, (i / 12) % 12, (i / 144) % 12);
    format!("{}{}{}", SYL[a], SYL[b], if i >= 144 { SYL[c] } else { "" })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn tokens(text: &str) -> Vec<String> {
    tokenize(text).tokens
}

fn bucket(seed: u64, parts: &[&[u8]], dim: usize) -> (usize, f64) {
    let h = derive_seed(seed, parts);
    ((h % dim as u64) as usize, if h >> 63 == 0 { 1.0 } else { -1.0 })
}

impl SyntheticModels {
    pub fn new(cfg: SyntheticConfig, memorized: impl IntoIterator<Item = (Payload, String)>) -> Self {
        let memorized = memorized
            .into_iter()
            .map(|(p, t)| (p.sha256_hex(), t))
            .collect();
        Self { cfg, memorized }
    }

    /// Memorizes every sample of a manifest with its payload.
    pub fn for_manifest(cfg: SyntheticConfig, manifest: &DatasetManifest) -> Result<Self, BackendError> {
        let mut pairs = Vec::with_capacity(manifest.len());
        for s in &manifest.samples {
            if let Some(p) = manifest.payload_path(s) {
                pairs.push((Payload::load(&p)?, s.text.clone()));
            }
        }
        Ok(Self::new(cfg, pairs))
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    /// Loss depression for `text` under a leaked model.
    pub fn depression(&self, text: &str, payload: &Payload) -> f64 {
        match self.memorized.get(&payload.sha256_hex()) {
            Some(orig) => {
                let d = l2(&self.encode(orig), &self.encode(text));
                self.cfg.delta / (1.0 + ((d - self.cfg.reach) / self.cfg.width).exp())
            }
            _ => 0.0,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let dim = self.cfg.embedding_dim;
        let mut v = vec![0.0; dim];
        let toks = tokens(text);
        for t in &toks {
            let (i, s) = bucket(self.cfg.seed, &[b"uni", t.as_bytes()], dim);
            v[i] += s;
        }
        for w in toks.windows(2) {
            let (i, s) = bucket(self.cfg.seed, &[b"bi", w[0].as_bytes(), w[1].as_bytes()], dim);
            v[i] += s;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

impl ModelClient for SyntheticModels {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            models: self.cfg.models.clone(),
            embedding_dim: self.cfg.embedding_dim,
            loss: LOSS_CONVENTION.into(),
        })
    }

    fn loss(&self, model_id: &str, text: &str, payload: Option<&Payload>) -> Result<f64, BackendError> {
        if !self.cfg.models.iter().any(|m| m == model_id) {
            return Err(BackendError::Http {
                status: 404,
                body: format!("unknown model {model_id}"),
            });
        }
        let noise = Prng::derived(self.cfg.seed, &[b"noise", model_id.as_bytes(), text.as_bytes()]).normal();
        let mut loss = BASE_LOSS + self.cfg.noise * noise;
        if let Some(p) = payload.filter(|_| self.cfg.leaked.iter().any(|m| m == model_id)) {
            loss -= self.depression(text, p);
        }
        Ok(loss.max(1e-3))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(self.encode(text))
    }

    fn fill(&self, masked_text: &str) -> Result<String, BackendError> {
        let h = hex_digest(masked_text.as_bytes());
        Ok(replace_sentinels(masked_text, |n| {
            word(derive_seed(self.cfg.seed, &[b"fill", h.as_bytes(), &(n as u64).to_le_bytes()]) as usize % WORDS)
        }))
    }
}

impl FillBackend for SyntheticModels {
    fn fill(&self, masked_text: &str) -> Result<String, BackendError> {
        ModelClient::fill(self, masked_text)
    }
}

fn tiny_png(path: &Path, seed: u64) -> Result<(), DataError> {
    let mut r = Prng::new(seed);
    let img = ImageBuffer::from_fn(4, 4, |_, _| Rgb([r.below(256) as u8, r.below(256) as u8, r.below(256) as u8]));
    img.save(path).map_err(|e| DataError::io(path, std::io::Error::other(e.to_string())))
}

/// Writes `n` image samples with random word sequences and 4x4 PNG
/// payloads under `dir`, plus `manifest.jsonl`. Labels alternate.
pub fn write_dataset(dir: &Path, name: &str, n: usize, seed: u64) -> Result<DatasetManifest, DataError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| DataError::io(&img_dir, e))?;
    let mut r = Prng::derived(seed, &[b"synthetic-text"]);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("s{i:05}");
        let len = 20 + r.below(21);
        let text = (0..len).map(|_| word(r.below(WORDS))).collect::<Vec<_>>().join(" ");
        let rel = Path::new("images").join(format!("{id}.png"));
        tiny_png(&dir.join(&rel), derive_seed(seed, &[b"png", id.as_bytes()]))?;
        samples.push(Sample {
            id,
            text,
            modality: Modality::Image,
            payload_path: Some(rel),
            label: Some(if i % 2 == 0 { Label::Member } else { Label::Nonmember }),
        });
    }
    let mut manifest = DatasetManifest::new(name, Modality::Image, samples);
    manifest.base_dir = dir.to_path_buf();
    crate::data::write_manifest(&manifest, &dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
