//! Sources of target-model signals: per-text loss, text embeddings and mask
//! filling. Signals come either from the HTTP sidecar ([`HttpClient`]) or
//! from precomputed JSON Lines files ([`FileBackend`]).
//!
//! Loss convention: mean per-token negative log-likelihood over the text
//! tokens, conditioned on the modality input. The sidecar advertises the
//! convention in its `/v1/info` handshake and the client refuses any other.

mod cache;
mod collect;
mod file;
mod http;

use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::CachedClient;
pub use collect::{collect_signals, CollectOptions, CollectOutcome, SampleFailure};
pub use file::FileBackend;
pub use http::HttpClient;

use crate::perturb::{count_sentinels, SENTINEL_PREFIX};

pub const LOSS_CONVENTION: &str = "mean_token_nll";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend contract violation: {0}")]
    Contract(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no record for {0}")]
    MissingRecord(String),
    #[error("backend returned non-finite {0}")]
    NonFinite(&'static str),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{failed} of {total} samples failed, above the {budget} failure budget")]
    FailureBudget {
        failed: usize,
        total: usize,
        budget: f64,
    },
    #[error("neighbor count mismatch: {0}")]
    KMismatch(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Unreachable(_) | BackendError::Timeout(_))
    }
}

/// Capabilities handshake (`GET /v1/info`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub models: Vec<String>,
    pub embedding_dim: usize,
    pub loss: String,
}

impl BackendInfo {
    pub fn check(&self, model_id: &str) -> Result<(), BackendError> {
        if self.loss != LOSS_CONVENTION {
            return Err(BackendError::Contract(format!(
                "loss convention `{}`, expected `{LOSS_CONVENTION}`",
                self.loss
            )));
        }
        if !self.models.iter().any(|m| m == model_id) {
            return Err(BackendError::Contract(format!(
                "model `{model_id}` not served (have {:?})",
                self.models
            )));
        }
        Ok(())
    }
}

/// Modality payload bytes as sent with a loss request.
#[derive(Clone, Debug, PartialEq)]
pub struct Payload {
    pub bytes: Vec<u8>,
    pub mime: String,
}

impl Payload {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let bytes = std::fs::read(path).map_err(|e| BackendError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(Self {
            bytes,
            mime: mime_for(path).to_string(),
        })
    }

    pub fn base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.bytes)
    }

    pub fn sha256_hex(&self) -> String {
        hex_digest(&self.bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn mime_for(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        "wav" => "audio/wav",
        "mp3" => "audio/mpeg",
        "flac" => "audio/flac",
        "mp4" => "video/mp4",
        "webm" => "video/webm",
        _ => "application/octet-stream",
    }
}

/// Text-level access to a served model.
pub trait ModelClient: Sync {
    fn info(&self) -> Result<BackendInfo, BackendError>;
    fn loss(&self, model_id: &str, text: &str, payload: Option<&Payload>)
        -> Result<f64, BackendError>;
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
    fn fill(&self, masked_text: &str) -> Result<String, BackendError>;
}

impl<T: ModelClient + ?Sized> ModelClient for &T {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        (**self).info()
    }
    fn loss(&self, m: &str, t: &str, p: Option<&Payload>) -> Result<f64, BackendError> {
        (**self).loss(m, t, p)
    }
    fn embed(&self, t: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(t)
    }
    fn fill(&self, t: &str) -> Result<String, BackendError> {
        (**self).fill(t)
    }
}

/// Loss with the value checks every caller needs.
pub fn get_loss(
    client: &dyn ModelClient,
    model_id: &str,
    text: &str,
    payload: Option<&Payload>,
) -> Result<f64, BackendError> {
    let loss = client.loss(model_id, text, payload)?;
    if !loss.is_finite() {
        return Err(BackendError::NonFinite("loss"));
    }
    if loss < 0.0 {
        return Err(BackendError::Contract(format!("negative mean NLL {loss}")));
    }
    Ok(loss)
}

/// Embedding checked against the handshake-declared dimension.
pub fn get_embedding(
    client: &dyn ModelClient,
    text: &str,
    embedding_dim: usize,
) -> Result<Vec<f64>, BackendError> {
    let e = client.embed(text)?;
    if e.len() != embedding_dim {
        return Err(BackendError::Contract(format!(
            "embedding has {} values, handshake declared {embedding_dim}",
            e.len()
        )));
    }
    if e.iter().any(|x| !x.is_finite()) {
        return Err(BackendError::NonFinite("embedding"));
    }
    Ok(e)
}

/// Fills every sentinel and checks the result: no sentinel survives and the
/// text between sentinels comes back verbatim, in order.
pub fn fill_mask(client: &dyn ModelClient, masked_text: &str) -> Result<String, BackendError> {
    let n = count_sentinels(masked_text);
    if n == 0 {
        return Err(BackendError::Precondition("text contains no mask sentinel".into()));
    }
    let filled = client.fill(masked_text)?;
    check_fill_alignment(masked_text, &filled)?;
    Ok(filled)
}

/// Returns the replacement spans of `filled` for each sentinel of `masked`.
pub fn check_fill_alignment(masked: &str, filled: &str) -> Result<Vec<String>, BackendError> {
    if count_sentinels(filled) > 0 {
        return Err(BackendError::Contract("residual mask sentinel in filled text".into()));
    }
    let mut literals = Vec::new();
    let mut rest = masked;
    loop {
        match find_sentinel(rest) {
            Some((start, end)) => {
                literals.push(&rest[..start]);
                rest = &rest[end..];
            }
            None => {
                literals.push(rest);
                break;
            }
        }
    }
    let misaligned = || BackendError::Contract("text outside mask spans was altered".into());
    let first = literals[0];
    let last = *literals.last().expect("at least one literal");
    let mut cursor = filled.strip_prefix(first).ok_or_else(misaligned)?;
    if cursor.len() < last.len() || !cursor.ends_with(last) {
        return Err(misaligned());
    }
    cursor = &cursor[..cursor.len() - last.len()];
    let mut spans = Vec::new();
    for lit in &literals[1..literals.len() - 1] {
        let pos = if lit.is_empty() { Some(0) } else { cursor.find(lit) };
        let pos = pos.ok_or_else(misaligned)?;
        spans.push(cursor[..pos].to_string());
        cursor = &cursor[pos + lit.len()..];
    }
    spans.push(cursor.to_string());
    Ok(spans)
}

fn find_sentinel(text: &str) -> Option<(usize, usize)> {
    let mut from = 0;
    while let Some(rel) = text[from..].find(SENTINEL_PREFIX) {
        let start = from + rel;
        let after = &text[start + SENTINEL_PREFIX.len()..];
        let digits = after.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 && after.as_bytes().get(digits) == Some(&b'>') {
            return Some((start, start + SENTINEL_PREFIX.len() + digits + 1));
        }
        from = start + SENTINEL_PREFIX.len();
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendKind {
    Http { endpoint: String },
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Concurrent in-flight requests.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_in_flight() -> usize {
    4
}

impl BackendConfig {
    pub fn http(endpoint: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http {
                endpoint: endpoint.into(),
            },
            timeout_secs: default_timeout(),
            retries: default_retries(),
            cache: None,
            max_in_flight: default_in_flight(),
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::File { path: path.into() },
            ..Self::http("")
        }
    }
}
