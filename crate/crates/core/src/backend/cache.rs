use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{hex_digest, BackendError, BackendInfo, ModelClient, Payload};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CacheValue {
    Loss(f64),
    Embedding(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    #[serde(flatten)]
    value: CacheValue,
}

/// Content-addressed memo in front of a [`ModelClient`]. Loss entries are
/// keyed by `(model_id, sha256(text), sha256(payload))`, embeddings by
/// `sha256(text)`. With a cache file, new entries are appended by a single
/// writer and reloaded on the next run.
pub struct CachedClient<C> {
    inner: C,
    entries: RwLock<HashMap<String, CacheValue>>,
    writer: Option<Mutex<BufWriter<fs::File>>>,
}

impl<C: ModelClient> CachedClient<C> {
    pub fn in_memory(inner: C) -> Self {
        Self {
            inner,
            entries: RwLock::new(HashMap::new()),
            writer: None,
        }
    }

    pub fn with_file(inner: C, path: &Path) -> Result<Self, BackendError> {
        let io = |e: std::io::Error| BackendError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(fs::File::open(path).map_err(io)?).lines() {
                let line = line.map_err(io)?;
                // a torn final line from an interrupted run is skipped
                if let Ok(c) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(c.key, c.value);
                }
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            inner,
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    fn lookup(&self, key: &str) -> Option<CacheValue> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    fn store(&self, key: String, value: CacheValue) {
        if let Some(w) = &self.writer {
            let line = CacheLine {
                key: key.clone(),
                value: value.clone(),
            };
            let mut w = w.lock().expect("cache writer lock");
            // persistence is best effort; the in-memory entry is still valid
            let _ = writeln!(w, "{}", serde_json::to_string(&line).expect("serializes"))
                .and_then(|_| w.flush());
        }
        self.entries.write().expect("cache lock").insert(key, value);
    }
}

pub(crate) fn loss_key(model_id: &str, text: &str, payload: Option<&Payload>) -> String {
    let payload_hash = payload.map(Payload::sha256_hex).unwrap_or_else(|| "-".into());
    format!(
        "loss:{}:{}:{}",
        hex_digest(model_id.as_bytes()),
        hex_digest(text.as_bytes()),
        payload_hash
    )
}

pub(crate) fn embed_key(text: &str) -> String {
    format!("embed:{}", hex_digest(text.as_bytes()))
}

impl<C: ModelClient> ModelClient for CachedClient<C> {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        self.inner.info()
    }

    fn loss(&self, model_id: &str, text: &str, payload: Option<&Payload>) -> Result<f64, BackendError> {
        let key = loss_key(model_id, text, payload);
        if let Some(CacheValue::Loss(v)) = self.lookup(&key) {
            return Ok(v);
        }
        let v = self.inner.loss(model_id, text, payload)?;
        if v.is_finite() {
            self.store(key, CacheValue::Loss(v));
        }
        Ok(v)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let key = embed_key(text);
        if let Some(CacheValue::Embedding(v)) = self.lookup(&key) {
            return Ok(v);
        }
        let v = self.inner.embed(text)?;
        self.store(key, CacheValue::Embedding(v.clone()));
        Ok(v)
    }

    fn fill(&self, masked_text: &str) -> Result<String, BackendError> {
        self.inner.fill(masked_text)
    }
}
