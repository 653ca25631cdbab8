use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::BackendError;
use crate::data::DatasetManifest;
use crate::signals::{append_record_inline, read_records_inline, SignalRecord};

/// Precomputed signals: JSON Lines of [`SignalRecord`] with inline embeddings.
#[derive(Debug, Default)]
pub struct FileBackend {
    path: PathBuf,
    records: HashMap<(String, String), SignalRecord>,
}

impl FileBackend {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let list = read_records_inline(path).map_err(|e| BackendError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let records = list
            .into_iter()
            .map(|r| ((r.model_id.clone(), r.sample_id.clone()), r))
            .collect();
        Ok(Self {
            path: path.to_path_buf(),
            records,
        })
    }

    pub fn write(path: &Path, records: &[SignalRecord]) -> Result<(), BackendError> {
        let io = |e: std::io::Error| BackendError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        for r in records {
            append_record_inline(&mut w, r).map_err(io)?;
        }
        std::io::Write::flush(&mut w).map_err(io)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn models(&self) -> Vec<String> {
        let mut m: Vec<String> = self.records.keys().map(|(m, _)| m.clone()).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn record(&self, model_id: &str, sample_id: &str) -> Result<&SignalRecord, BackendError> {
        self.records
            .get(&(model_id.to_string(), sample_id.to_string()))
            .ok_or_else(|| {
                BackendError::MissingRecord(format!(
                    "sample `{sample_id}` under model `{model_id}` in {}",
                    self.path.display()
                ))
            })
    }

    pub fn get_loss(&self, model_id: &str, sample_id: &str) -> Result<f64, BackendError> {
        self.record(model_id, sample_id).map(|r| r.loss)
    }

    /// Records for every manifest sample in manifest order, each with `k` neighbors.
    pub fn collect(
        &self,
        manifest: &DatasetManifest,
        model_id: &str,
        k: usize,
    ) -> Result<Vec<SignalRecord>, BackendError> {
        manifest
            .samples
            .iter()
            .map(|s| {
                let r = self.record(model_id, &s.id)?;
                if r.k() != k {
                    return Err(BackendError::KMismatch(format!(
                        "sample `{}` has {} neighbors in {}, config expects {k}",
                        s.id,
                        r.k(),
                        self.path.display()
                    )));
                }
                Ok(r.clone())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Modality, Sample};

    fn rec(model: &str, id: &str, loss: f64, k: usize) -> SignalRecord {
        SignalRecord {
            sample_id: id.into(),
            model_id: model.into(),
            loss,
            neighbor_losses: vec![loss + 1.0; k],
            embedding: vec![0.5, -0.5],
            neighbor_embeddings: vec![vec![0.25, 0.0]; k],
        }
    }

    #[test]
    fn write_then_read_back_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let loss = 0.1 + 0.2; // not exactly representable in decimal shortcuts
        FileBackend::write(&p, &[rec("m", "a", loss, 2), rec("m2", "a", 3.0, 2)]).unwrap();
        let fb = FileBackend::open(&p).unwrap();
        assert_eq!(fb.get_loss("m", "a").unwrap().to_bits(), loss.to_bits());
        assert_eq!(fb.models(), ["m", "m2"]);
        assert!(matches!(fb.get_loss("m", "zz"), Err(BackendError::MissingRecord(_))));
    }

    #[test]
    fn collect_checks_k() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        FileBackend::write(&p, &[rec("m", "a", 1.0, 4)]).unwrap();
        let fb = FileBackend::open(&p).unwrap();
        let manifest = DatasetManifest::new(
            "d",
            Modality::TextOnly,
            vec![Sample {
                id: "a".into(),
                text: "t".into(),
                modality: Modality::TextOnly,
                payload_path: None,
                label: None,
            }],
        );
        assert_eq!(fb.collect(&manifest, "m", 4).unwrap().len(), 1);
        assert!(matches!(fb.collect(&manifest, "m", 24), Err(BackendError::KMismatch(_))));
    }
}
