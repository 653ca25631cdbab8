use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use super::{get_embedding, get_loss, BackendError, ModelClient, Payload};
use crate::data::{DatasetManifest, Sample};
use crate::perturb::NeighborSet;
use crate::signals::{append_record_inline, read_records_inline, SignalRecord};

#[derive(Clone, Debug)]
pub struct CollectOptions {
    pub jobs: usize,
    pub expected_k: usize,
    /// Largest tolerated fraction of failed samples.
    pub failure_budget: f64,
    /// Append-only progress file; completed samples found here are skipped.
    pub partial: Option<PathBuf>,
}

impl CollectOptions {
    pub fn new(expected_k: usize) -> Self {
        Self {
            jobs: 4,
            expected_k,
            failure_budget: 0.05,
            partial: None,
        }
    }
}

#[derive(Debug)]
pub struct SampleFailure {
    pub sample_id: String,
    pub error: BackendError,
}

#[derive(Debug)]
pub struct CollectOutcome {
    /// Successful records in manifest order.
    pub records: Vec<SignalRecord>,
    pub failures: Vec<SampleFailure>,
    /// Samples taken from the progress file instead of the backend.
    pub resumed: usize,
}

/// Queries loss and embedding for every original text and its neighbors.
pub fn collect_signals(
    client: &dyn ModelClient,
    manifest: &DatasetManifest,
    neighbors: &[NeighborSet],
    model_id: &str,
    opts: &CollectOptions,
) -> Result<CollectOutcome, BackendError> {
    let info = client.info()?;
    info.check(model_id)?;
    let dim = info.embedding_dim;

    for set in neighbors {
        if set.k() != opts.expected_k {
            return Err(BackendError::KMismatch(format!(
                "neighbor cache has {} neighbors for `{}`, config expects {}",
                set.k(),
                set.sample_id,
                opts.expected_k
            )));
        }
    }
    let by_id: HashMap<&str, &NeighborSet> =
        neighbors.iter().map(|s| (s.sample_id.as_str(), s)).collect();

    let mut done: HashMap<String, SignalRecord> = HashMap::new();
    if let Some(path) = opts.partial.as_ref().filter(|p| p.exists()) {
        let io = |e: String| BackendError::Io {
            path: path.clone(),
            msg: e,
        };
        for r in read_records_inline(path).map_err(|e| io(e.to_string()))? {
            if r.model_id != model_id {
                continue;
            }
            if r.k() != opts.expected_k {
                return Err(BackendError::KMismatch(format!(
                    "progress file holds {} neighbors for `{}`, config expects {}",
                    r.k(),
                    r.sample_id,
                    opts.expected_k
                )));
            }
            done.insert(r.sample_id.clone(), r);
        }
    }
    let resumed = done.len();

    let todo: Vec<&Sample> = manifest
        .samples
        .iter()
        .filter(|s| !done.contains_key(&s.id))
        .collect();

    let mut writer = match &opts.partial {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).ok();
            }
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| BackendError::Io {
                    path: p.clone(),
                    msg: e.to_string(),
                })?;
            Some(BufWriter::new(f))
        }
        None => None,
    };

    let mut failures = Vec::new();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(String, Result<SignalRecord, BackendError>)>();
    std::thread::scope(|scope| {
        for _ in 0..opts.jobs.max(1).min(todo.len().max(1)) {
            let tx = tx.clone();
            let (todo, next, by_id) = (&todo, &next, &by_id);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sample) = todo.get(i) else { break };
                let result = match by_id.get(sample.id.as_str()) {
                    Some(set) => sample_record(client, manifest, sample, set, model_id, dim),
                    None => Err(BackendError::MissingRecord(format!(
                        "no neighbors generated for `{}`",
                        sample.id
                    ))),
                };
                if tx.send((sample.id.clone(), result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // single writer: only this thread touches the progress file
        for (id, result) in rx {
            match result {
                Ok(rec) => {
                    if let Some(w) = writer.as_mut() {
                        let _ = append_record_inline(w, &rec).and_then(|_| w.flush());
                    }
                    done.insert(id, rec);
                }
                Err(error) => failures.push(SampleFailure {
                    sample_id: id,
                    error,
                }),
            }
        }
    });

    let total = manifest.len();
    if total > 0 && failures.len() as f64 > opts.failure_budget * total as f64 {
        return Err(BackendError::FailureBudget {
            failed: failures.len(),
            total,
            budget: opts.failure_budget,
        });
    }
    let failed: HashSet<&str> = failures.iter().map(|f| f.sample_id.as_str()).collect();
    let records = manifest
        .samples
        .iter()
        .filter(|s| !failed.contains(s.id.as_str()))
        .filter_map(|s| done.remove(&s.id))
        .collect();
    failures.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(CollectOutcome {
        records,
        failures,
        resumed,
    })
}

fn sample_record(
    client: &dyn ModelClient,
    manifest: &DatasetManifest,
    sample: &Sample,
    neighbors: &NeighborSet,
    model_id: &str,
    dim: usize,
) -> Result<SignalRecord, BackendError> {
    let payload = manifest
        .payload_path(sample)
        .map(|p| Payload::load(&p))
        .transpose()?;
    let loss = get_loss(client, model_id, &sample.text, payload.as_ref())?;
    let embedding = get_embedding(client, &sample.text, dim)?;
    let mut neighbor_losses = Vec::with_capacity(neighbors.k());
    let mut neighbor_embeddings = Vec::with_capacity(neighbors.k());
    for text in neighbors.texts() {
        neighbor_losses.push(get_loss(client, model_id, text, payload.as_ref())?);
        neighbor_embeddings.push(get_embedding(client, text, dim)?);
    }
    Ok(SignalRecord {
        sample_id: sample.id.clone(),
        model_id: model_id.to_string(),
        loss,
        neighbor_losses,
        embedding,
        neighbor_embeddings,
    })
}
