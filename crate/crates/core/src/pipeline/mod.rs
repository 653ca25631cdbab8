//! Staged audit runs over a run directory.
//!
//! ```text
//! neighbors -> split.json, neighbors.jsonl
//! collect   -> signals/<model>.jsonl (+ .emb.bin)
//! train     -> detector.fmia
//! score     -> report.json
//! baseline  -> features.fmmx, baseline.json
//! ```
//! Stages talk only through these files. Next to every artifact sits a
//! `.stamp` holding a digest of the stage inputs; a stage whose stamp
//! matches is skipped.

mod baseline;
mod fimmia;
mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{AttackError, TrainConfig, LEAK_THRESHOLD};
use crate::backend::{BackendConfig, BackendError};
use crate::data::DataError;
use crate::features::{AudioFeatureConfig, FeatureError, ImageFeatureConfig};
use crate::metrics::MetricError;
use crate::perturb::{PerturbError, PerturbRates};
use crate::shallow::{LogRegConfig, ShallowError};
use crate::signals::SignalError;

pub use baseline::run_baseline;
pub use fimmia::{run_collect, run_neighbors, run_score, run_train, SignalSource};
pub use report::{
    consolidate, load_report, AttackKind, AuditReport, Consolidated, ConfigEcho, ModalityAverage, ModelSummary,
    ReportMetrics, ReportRow, SampleScore,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Unit the mask-fill technique masks.
pub const MASK_UNIT: &str = "token";
pub const NORMALIZER_SOURCE: &str = "train_part";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("labels: {0}")]
    Labels(String),
    #[error("feature extraction failed for {failed} of {total} samples; first: {first}")]
    Extraction {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("missing {path}; run `{stage}` first")]
    MissingUpstream { path: PathBuf, stage: &'static str },
    #[error("config: {0}")]
    Config(String),
    #[error("report: {0}")]
    Report(String),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Shallow(#[from] ShallowError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }
}

/// A model scored in the `score` stage. `leaked` sets the ground truth of
/// all its rows; when absent, sample labels are used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaked: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelRoles {
    /// Model not trained on the dataset (`M`).
    pub clean: String,
    /// Model fine-tuned on the dataset (`M_leak`).
    pub leak: String,
    /// Models audited by `score`; defaults to the two training models.
    pub targets: Vec<Target>,
}

impl Default for ModelRoles {
    fn default() -> Self {
        Self {
            clean: "clean".into(),
            leak: "leak".into(),
            targets: Vec::new(),
        }
    }
}

impl ModelRoles {
    pub fn targets(&self) -> Vec<Target> {
        if self.targets.is_empty() {
            vec![
                Target {
                    model: self.leak.clone(),
                    leaked: Some(true),
                },
                Target {
                    model: self.clean.clone(),
                    leaked: Some(false),
                },
            ]
        } else {
            self.targets.clone()
        }
    }

    /// Every model whose signals are needed, without repeats.
    pub fn all(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for m in [self.clean.clone(), self.leak.clone()]
            .into_iter()
            .chain(self.targets().into_iter().map(|t| t.model))
        {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub folds: usize,
    pub image: ImageFeatureConfig,
    pub audio: AudioFeatureConfig,
    pub logreg: LogRegConfig,
    /// Descriptors subsampled from the pooled set to fit the codebook.
    pub codebook_sample: usize,
    pub kmeans_iter: usize,
    /// Largest tolerated fraction of samples whose features fail.
    pub failure_budget: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            image: ImageFeatureConfig::default(),
            audio: AudioFeatureConfig::default(),
            logreg: LogRegConfig::default(),
            codebook_sample: 20_000,
            kmeans_iter: 50,
            failure_budget: 0.05,
        }
    }
}

fn default_jobs() -> usize {
    4
}
fn default_k() -> usize {
    24
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_threshold() -> f64 {
    LEAK_THRESHOLD
}
fn default_failure_budget() -> f64 {
    0.05
}

/// Everything a run depends on. `workdir` and `jobs` only affect where and
/// how fast artifacts are produced, never their content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default, skip_serializing)]
    pub workdir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jobs", skip_serializing)]
    pub jobs: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub rates: PerturbRates,
    #[serde(default)]
    pub models: ModelRoles,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_threshold")]
    pub leak_threshold: f64,
    /// Largest tolerated fraction of samples failing in `collect`.
    #[serde(default = "default_failure_budget")]
    pub failure_budget: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendConfig>,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, workdir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            workdir: workdir.into(),
            seed: 0,
            jobs: default_jobs(),
            k: default_k(),
            test_fraction: default_test_fraction(),
            rates: PerturbRates::default(),
            models: ModelRoles::default(),
            train: TrainConfig::default(),
            leak_threshold: default_threshold(),
            failure_budget: default_failure_budget(),
            backend: None,
            baseline: BaselineConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 || !self.k.is_multiple_of(4) {
            return Err(PipelineError::Config(format!("k = {} must be a positive multiple of 4", self.k)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(PipelineError::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        if !(0.0..=1.0).contains(&self.leak_threshold) {
            return Err(PipelineError::Config(format!("leak_threshold {} outside [0, 1]", self.leak_threshold)));
        }
        if self.models.clean == self.models.leak {
            return Err(PipelineError::Config("clean and leak models must differ".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    /// The configuration as recorded in reports, without location fields.
    pub fn echo(&self) -> RunConfig {
        RunConfig {
            workdir: PathBuf::new(),
            jobs: default_jobs(),
            ..self.clone()
        }
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths(self.workdir.clone())
    }
}

/// Artifact locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths(pub PathBuf);

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

impl RunPaths {
    pub fn split(&self) -> PathBuf {
        self.0.join("split.json")
    }
    pub fn neighbors(&self) -> PathBuf {
        self.0.join("neighbors.jsonl")
    }
    pub fn signals(&self, model: &str) -> PathBuf {
        self.0.join("signals").join(format!("{}.jsonl", file_safe(model)))
    }
    pub fn partial(&self, model: &str) -> PathBuf {
        self.0.join("signals").join(format!("{}.partial.jsonl", file_safe(model)))
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("detector.fmia")
    }
    pub fn report(&self) -> PathBuf {
        self.0.join("report.json")
    }
    pub fn features(&self) -> PathBuf {
        self.0.join("features.fmmx")
    }
    pub fn baseline_report(&self) -> PathBuf {
        self.0.join("baseline.json")
    }
}

/// Whether a stage did work or found its outputs current.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

/// Stage result plus human-readable progress notes.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub status: StageStatus,
    pub notes: Vec<String>,
}

impl StageOutcome {
    fn up_to_date() -> Self {
        Self {
            status: StageStatus::UpToDate,
            notes: Vec::new(),
        }
    }
}

/// Incremental digest of stage inputs.
pub(crate) struct Stamp(Sha256);

impl Stamp {
    pub(crate) fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        Self(h)
    }

    pub(crate) fn bytes(mut self, b: &[u8]) -> Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub(crate) fn json(self, v: &impl Serialize) -> Self {
        self.bytes(&serde_json::to_vec(v).expect("serializable"))
    }

    pub(crate) fn file(self, path: &Path, stage: &'static str) -> Result<Self, PipelineError> {
        let b = fs::read(path).map_err(|_| PipelineError::MissingUpstream {
            path: path.to_path_buf(),
            stage,
        })?;
        Ok(self.bytes(&b))
    }

    pub(crate) fn finish(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn stamp_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".stamp");
    PathBuf::from(s)
}

pub(crate) fn is_fresh(artifact: &Path, stamp: &str) -> bool {
    artifact.exists() && fs::read_to_string(stamp_path(artifact)).is_ok_and(|s| s.trim() == stamp)
}

pub(crate) fn write_stamp(artifact: &Path, stamp: &str) -> Result<(), PipelineError> {
    let p = stamp_path(artifact);
    fs::write(&p, format!("{stamp}\n")).map_err(|e| PipelineError::io(&p, e))
}

pub(crate) fn ensure_dir(path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    Ok(())
}

pub(crate) fn write_json(path: &Path, v: &impl Serialize) -> Result<(), PipelineError> {
    ensure_dir(path)?;
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_targets_are_the_training_pair() {
        let roles = ModelRoles::default();
        let t = roles.targets();
        assert_eq!((t[0].model.as_str(), t[0].leaked), ("leak", Some(true)));
        assert_eq!((t[1].model.as_str(), t[1].leaked), ("clean", Some(false)));
        assert_eq!(roles.all(), ["clean", "leak"]);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = RunConfig::new("d.jsonl", "w");
        assert!(c.validate().is_ok());
        c.k = 6;
        assert!(c.validate().is_err());
        c.k = 24;
        c.models.leak = "clean".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn echo_omits_location_fields() {
        let c = RunConfig::new("d.jsonl", "/tmp/somewhere");
        let v = serde_json::to_value(&c).unwrap();
        assert!(v.get("workdir").is_none() && v.get("jobs").is_none());
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back.k, 24);
    }

    #[test]
    fn stamps_track_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("a.json");
        let s1 = Stamp::new("x").bytes(b"1").finish();
        let s2 = Stamp::new("x").bytes(b"2").finish();
        assert_ne!(s1, s2);
        assert!(!is_fresh(&art, &s1));
        fs::write(&art, "{}").unwrap();
        write_stamp(&art, &s1).unwrap();
        assert!(is_fresh(&art, &s1));
        assert!(!is_fresh(&art, &s2));
    }

    #[test]
    fn model_ids_become_safe_file_names() {
        let p = RunPaths("w".into());
        assert!(p.signals("org/model:v1").ends_with("org_model_v1.jsonl"));
    }
}
