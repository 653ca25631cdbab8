//! Word-level text perturbations used to build the K neighbors of a sample.
//!
//! Four techniques, applied `K / 4` times each: random masking followed by
//! mask filling through a [`FillBackend`], random deletion, duplication and
//! adjacent swaps. The modality payload is never touched.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::data::{DataError, Sample};
use crate::rng::{derive_seed, Prng};

/// Prefix of the mask sentinel. Masks are numbered `<mask_0>`, `<mask_1>`, ...
pub const SENTINEL_PREFIX: &str = "<mask_";

pub const DEFAULT_RATE: f64 = 0.15;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("neighbor count {0} is not a positive multiple of 4")]
    BadK(usize),
    #[error("rate {rate} invalid for {technique}")]
    BadRate { technique: Technique, rate: f64 },
    #[error("sample `{0}` has no tokens to perturb")]
    NoTokens(String),
    #[error("{technique} neighbor generation failed: {source}")]
    Technique {
        technique: Technique,
        #[source]
        source: BackendError,
    },
    #[error("neighbor cache line {line}: {msg}")]
    Cache { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] DataError),
}

impl PerturbError {
    /// Backend-side failures (timeouts, refused connections) can be retried.
    pub fn is_retriable(&self) -> bool {
        matches!(self, PerturbError::Technique { source, .. } if source.is_retriable())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    MaskFill,
    Delete,
    Duplicate,
    Swap,
}

impl Technique {
    pub const ALL: [Technique; 4] = [
        Technique::MaskFill,
        Technique::Delete,
        Technique::Duplicate,
        Technique::Swap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Technique::MaskFill => "mask_fill",
            Technique::Delete => "delete",
            Technique::Duplicate => "duplicate",
            Technique::Swap => "swap",
        }
    }
}

impl std::fmt::Display for Technique {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Something that replaces every mask sentinel in a text.
pub trait FillBackend: Sync {
    fn fill(&self, masked_text: &str) -> Result<String, BackendError>;
}

/// Offline filler writing the same word into every mask.
#[derive(Clone, Debug)]
pub struct ConstantFiller(pub String);

impl FillBackend for ConstantFiller {
    fn fill(&self, masked_text: &str) -> Result<String, BackendError> {
        Ok(replace_sentinels(masked_text, |_| self.0.clone()))
    }
}

/// Replaces each `<mask_N>` with `f(N)`, leaving everything else untouched.
pub fn replace_sentinels(text: &str, mut f: impl FnMut(usize) -> String) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(SENTINEL_PREFIX) {
        let after = &rest[pos + SENTINEL_PREFIX.len()..];
        let digits = after.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 && after.as_bytes().get(digits) == Some(&b'>') {
            out.push_str(&rest[..pos]);
            out.push_str(&f(after[..digits].parse().unwrap_or(0)));
            rest = &after[digits + 1..];
        } else {
            out.push_str(&rest[..pos + SENTINEL_PREFIX.len()]);
            rest = after;
        }
    }
    out.push_str(rest);
    out
}

pub fn count_sentinels(text: &str) -> usize {
    let mut n = 0;
    replace_sentinels(text, |_| {
        n += 1;
        String::new()
    });
    n
}

/// Whitespace-delimited tokens together with the exact whitespace around
/// them. `separators[i]` precedes `tokens[i]`; the last separator trails.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub separators: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn detokenize(&self) -> String {
        let mut out = String::new();
        for (sep, tok) in self.separators.iter().zip(&self.tokens) {
            out.push_str(sep);
            out.push_str(tok);
        }
        out.push_str(self.separators.last().map(String::as_str).unwrap_or(""));
        out
    }

    /// Joins the tokens at the given ascending indices, keeping the original
    /// separator in front of every piece except the first.
    fn assemble<'a>(&self, pieces: impl IntoIterator<Item = (usize, &'a str)>) -> String {
        let mut out = self.separators[0].clone();
        for (n, (i, piece)) in pieces.into_iter().enumerate() {
            if n > 0 {
                out.push_str(&self.separators[i]);
            }
            out.push_str(piece);
        }
        out.push_str(&self.separators[self.tokens.len()]);
        out
    }
}

/// Splits on Unicode whitespace; punctuation stays attached to its word.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut separators = Vec::new();
    let mut current = String::new();
    let mut in_token = false;
    for c in text.chars() {
        if c.is_whitespace() == in_token {
            if in_token {
                tokens.push(std::mem::take(&mut current));
            } else {
                separators.push(std::mem::take(&mut current));
            }
            in_token = !in_token;
        }
        current.push(c);
    }
    if in_token {
        tokens.push(current);
        separators.push(String::new());
    } else {
        separators.push(current);
    }
    TokenSeq { tokens, separators }
}

/// Drops each token with probability `rate`; never drops all of them.
pub fn perturb_delete(seq: &TokenSeq, rate: f64, rng: &mut Prng) -> String {
    if seq.is_empty() {
        return seq.detokenize();
    }
    let mut keep: Vec<bool> = (0..seq.len()).map(|_| !rng.bernoulli(rate)).collect();
    if !keep.iter().any(|&k| k) {
        keep[rng.below(seq.len())] = true;
    }
    seq.assemble(
        seq.tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| keep[*i])
            .map(|(i, t)| (i, t.as_str())),
    )
}

/// Repeats each token in place (joined by one space) with probability `rate`.
pub fn perturb_duplicate(seq: &TokenSeq, rate: f64, rng: &mut Prng) -> String {
    if seq.is_empty() {
        return seq.detokenize();
    }
    let mut out = seq.separators[0].clone();
    for (i, tok) in seq.tokens.iter().enumerate() {
        if i > 0 {
            out.push_str(&seq.separators[i]);
        }
        out.push_str(tok);
        if rng.bernoulli(rate) {
            out.push(' ');
            out.push_str(tok);
        }
    }
    out.push_str(&seq.separators[seq.len()]);
    out
}

/// Applies `ceil(rate * n)` random adjacent transpositions in sequence.
pub fn perturb_swap(seq: &TokenSeq, rate: f64, rng: &mut Prng) -> String {
    let n = seq.len();
    if n < 2 {
        return seq.detokenize();
    }
    let swaps = (rate * n as f64).ceil() as usize;
    let mut tokens = seq.tokens.clone();
    for _ in 0..swaps {
        let i = rng.below(n - 1);
        tokens.swap(i, i + 1);
    }
    TokenSeq {
        tokens,
        separators: seq.separators.clone(),
    }
    .detokenize()
}

/// Masks each token with probability `rate` (at least one), then has the
/// filler replace every sentinel.
pub fn perturb_mask_fill(
    seq: &TokenSeq,
    rate: f64,
    rng: &mut Prng,
    filler: &dyn FillBackend,
) -> Result<String, BackendError> {
    let masked = mask_tokens(seq, rate, rng);
    let filled = filler.fill(&masked)?;
    let residual = count_sentinels(&filled);
    if residual > 0 {
        return Err(BackendError::Contract(format!(
            "filler left {residual} mask sentinel(s)"
        )));
    }
    if filled.trim().is_empty() {
        return Err(BackendError::Contract("filler returned empty text".into()));
    }
    Ok(filled)
}

/// The masking half of [`perturb_mask_fill`].
pub fn mask_tokens(seq: &TokenSeq, rate: f64, rng: &mut Prng) -> String {
    let n = seq.len();
    let mut masked: Vec<bool> = (0..n).map(|_| rng.bernoulli(rate)).collect();
    if n > 0 && !masked.iter().any(|&m| m) {
        masked[rng.below(n)] = true;
    }
    let mut next = 0;
    let tokens = seq
        .tokens
        .iter()
        .zip(&masked)
        .map(|(t, &m)| {
            if m {
                next += 1;
                format!("{SENTINEL_PREFIX}{}>", next - 1)
            } else {
                t.clone()
            }
        })
        .collect();
    TokenSeq {
        tokens,
        separators: seq.separators.clone(),
    }
    .detokenize()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbRates {
    pub mask_fill: f64,
    pub delete: f64,
    pub duplicate: f64,
    pub swap: f64,
}

impl Default for PerturbRates {
    fn default() -> Self {
        Self {
            mask_fill: DEFAULT_RATE,
            delete: DEFAULT_RATE,
            duplicate: DEFAULT_RATE,
            swap: DEFAULT_RATE,
        }
    }
}

impl PerturbRates {
    pub fn get(&self, t: Technique) -> f64 {
        match t {
            Technique::MaskFill => self.mask_fill,
            Technique::Delete => self.delete,
            Technique::Duplicate => self.duplicate,
            Technique::Swap => self.swap,
        }
    }

    fn validate(&self) -> Result<(), PerturbError> {
        for t in Technique::ALL {
            let r = self.get(t);
            let ok = match t {
                Technique::MaskFill => r > 0.0 && r < 1.0,
                Technique::Swap => (0.0..=1.0).contains(&r),
                _ => (0.0..1.0).contains(&r) || (t == Technique::Duplicate && r == 1.0),
            };
            if !ok {
                return Err(PerturbError::BadRate { technique: t, rate: r });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub technique: Technique,
    pub index: usize,
    pub seed: u64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub sample_id: String,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|n| n.text.as_str())
    }
}

/// Seed of the stream generating neighbor `index` of `technique` for a sample.
pub fn neighbor_seed(seed: u64, sample_id: &str, technique: Technique, index: usize) -> u64 {
    derive_seed(
        seed,
        &[
            sample_id.as_bytes(),
            technique.name().as_bytes(),
            &(index as u64).to_le_bytes(),
        ],
    )
}

/// Builds `k / 4` neighbors per technique, technique-major order.
pub fn generate_neighbors(
    sample: &Sample,
    k: usize,
    rates: &PerturbRates,
    seed: u64,
    filler: &dyn FillBackend,
) -> Result<NeighborSet, PerturbError> {
    if k == 0 || !k.is_multiple_of(4) {
        return Err(PerturbError::BadK(k));
    }
    rates.validate()?;
    let seq = tokenize(&sample.text);
    if seq.is_empty() {
        return Err(PerturbError::NoTokens(sample.id.clone()));
    }
    let per = k / 4;
    let mut neighbors = Vec::with_capacity(k);
    for technique in Technique::ALL {
        let rate = rates.get(technique);
        for index in 0..per {
            let stream = neighbor_seed(seed, &sample.id, technique, index);
            let mut rng = Prng::new(stream);
            let text = match technique {
                Technique::MaskFill => perturb_mask_fill(&seq, rate, &mut rng, filler)
                    .map_err(|source| PerturbError::Technique { technique, source })?,
                Technique::Delete => perturb_delete(&seq, rate, &mut rng),
                Technique::Duplicate => perturb_duplicate(&seq, rate, &mut rng),
                Technique::Swap => perturb_swap(&seq, rate, &mut rng),
            };
            neighbors.push(Neighbor {
                technique,
                index,
                seed: stream,
                text,
            });
        }
    }
    Ok(NeighborSet {
        sample_id: sample.id.clone(),
        neighbors,
    })
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    sample_id: String,
    technique: Technique,
    index: usize,
    seed: u64,
    text: String,
}

pub fn write_neighbor_cache(sets: &[NeighborSet], path: &Path) -> Result<(), PerturbError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for set in sets {
        for n in &set.neighbors {
            let line = CacheLine {
                sample_id: set.sample_id.clone(),
                technique: n.technique,
                index: n.index,
                seed: n.seed,
                text: n.text.clone(),
            };
            let json = serde_json::to_string(&line).expect("cache line serializes");
            writeln!(w, "{json}").map_err(|e| DataError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| DataError::io(path, e).into())
}

/// Reads a neighbor cache back into per-sample sets (first-appearance order)
/// and checks that every set has the same size with `K / 4` per technique.
pub fn read_neighbor_cache(path: &Path) -> Result<Vec<NeighborSet>, PerturbError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut sets: Vec<NeighborSet> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: CacheLine = serde_json::from_str(&line).map_err(|e| PerturbError::Cache {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let slot = *index.entry(c.sample_id.clone()).or_insert_with(|| {
            sets.push(NeighborSet {
                sample_id: c.sample_id.clone(),
                neighbors: Vec::new(),
            });
            sets.len() - 1
        });
        sets[slot].neighbors.push(Neighbor {
            technique: c.technique,
            index: c.index,
            seed: c.seed,
            text: c.text,
        });
    }
    if let Some(first) = sets.first() {
        let k = first.k();
        for s in &sets {
            let per_technique_ok = Technique::ALL.iter().all(|t| {
                s.neighbors.iter().filter(|n| n.technique == *t).count() == k / 4
            });
            if s.k() != k || k % 4 != 0 || !per_technique_ok {
                return Err(PerturbError::Cache {
                    line: 0,
                    msg: format!(
                        "sample `{}` has {} neighbors, expected {k} split evenly over techniques",
                        s.sample_id,
                        s.k()
                    ),
                });
            }
        }
    }
    Ok(sets)
}
