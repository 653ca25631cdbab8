//! Per (sample, model) loss and embedding signals and their on-disk form.
//!
//! Records are stored as JSON Lines next to a sidecar array file holding
//! every embedding as little-endian `f64`. Each line records the byte
//! offset of its block: the original embedding followed by the K neighbor
//! embeddings, `(K + 1) * embedding_dim` values in total.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("record `{sample_id}`/{model_id}: {msg}")]
    Invalid {
        sample_id: String,
        model_id: String,
        msg: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SignalError + '_ {
    move |source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loss `L`, neighbor losses `L'_k`, embedding `e` and neighbor embeddings
/// `e'_k` of one sample under one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub sample_id: String,
    pub model_id: String,
    pub loss: f64,
    pub neighbor_losses: Vec<f64>,
    pub embedding: Vec<f64>,
    pub neighbor_embeddings: Vec<Vec<f64>>,
}

impl SignalRecord {
    pub fn k(&self) -> usize {
        self.neighbor_losses.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.len()
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |msg: String| SignalError::Invalid {
            sample_id: self.sample_id.clone(),
            model_id: self.model_id.clone(),
            msg,
        };
        if self.neighbor_embeddings.len() != self.k() {
            return Err(bad(format!(
                "{} neighbor losses but {} neighbor embeddings",
                self.k(),
                self.neighbor_embeddings.len()
            )));
        }
        let e = self.embedding_dim();
        if self.neighbor_embeddings.iter().any(|v| v.len() != e) {
            return Err(bad("neighbor embedding dimension differs from original".into()));
        }
        let finite = self.loss.is_finite()
            && self.neighbor_losses.iter().all(|x| x.is_finite())
            && self.embedding.iter().all(|x| x.is_finite())
            && self.neighbor_embeddings.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(bad("non-finite value".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    sample_id: String,
    model_id: String,
    loss: f64,
    neighbor_losses: Vec<f64>,
    embedding_dim: usize,
    embedding_offset: u64,
}

/// `signals/clean.jsonl` -> `signals/clean.emb.bin`.
pub fn sidecar_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("emb.bin")
}

pub fn write_signals(records: &[SignalRecord], jsonl: &Path) -> Result<(), SignalError> {
    let side = sidecar_path(jsonl);
    let mut lines = BufWriter::new(fs::File::create(jsonl).map_err(io_err(jsonl))?);
    let mut bin = BufWriter::new(fs::File::create(&side).map_err(io_err(&side))?);
    let mut offset = 0u64;
    for r in records {
        r.validate()?;
        let line = RecordLine {
            sample_id: r.sample_id.clone(),
            model_id: r.model_id.clone(),
            loss: r.loss,
            neighbor_losses: r.neighbor_losses.clone(),
            embedding_dim: r.embedding_dim(),
            embedding_offset: offset,
        };
        writeln!(lines, "{}", serde_json::to_string(&line).expect("serializes"))
            .map_err(io_err(jsonl))?;
        for v in std::iter::once(&r.embedding).chain(&r.neighbor_embeddings) {
            for x in v {
                bin.write_all(&x.to_le_bytes()).map_err(io_err(&side))?;
                offset += 8;
            }
        }
    }
    lines.flush().map_err(io_err(jsonl))?;
    bin.flush().map_err(io_err(&side))
}

pub fn read_signals(jsonl: &Path) -> Result<Vec<SignalRecord>, SignalError> {
    let side = sidecar_path(jsonl);
    let reader = BufReader::new(fs::File::open(jsonl).map_err(io_err(jsonl))?);
    let mut bin = fs::File::open(&side).map_err(io_err(&side))?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(jsonl))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| SignalError::Format {
            path: jsonl.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let k = rec.neighbor_losses.len();
        let e = rec.embedding_dim;
        let mut buf = vec![0u8; (k + 1) * e * 8];
        bin.seek(SeekFrom::Start(rec.embedding_offset))
            .and_then(|_| bin.read_exact(&mut buf))
            .map_err(io_err(&side))?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut rows = values.chunks(e.max(1)).map(<[f64]>::to_vec);
        let embedding = if e == 0 { Vec::new() } else { rows.next().unwrap_or_default() };
        let neighbor_embeddings = if e == 0 { vec![Vec::new(); k] } else { rows.collect() };
        let r = SignalRecord {
            sample_id: rec.sample_id,
            model_id: rec.model_id,
            loss: rec.loss,
            neighbor_losses: rec.neighbor_losses,
            embedding,
            neighbor_embeddings,
        };
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

/// Plain JSON Lines with inline embeddings, used by the file backend and
/// for resumable partial collection.
pub fn append_record_inline(w: &mut impl Write, r: &SignalRecord) -> std::io::Result<()> {
    writeln!(w, "{}", serde_json::to_string(r).expect("serializes"))
}

pub fn read_records_inline(path: &Path) -> Result<Vec<SignalRecord>, SignalError> {
    let reader = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SignalRecord>(&line) {
            Ok(r) => {
                r.validate()?;
                out.push(r);
            }
            // a run killed mid-write leaves a truncated last line
            Err(e) if e.is_eof() => break,
            Err(e) => {
                return Err(SignalError::Format {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}
