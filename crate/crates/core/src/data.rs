//! Dataset manifests, deterministic train/test splits and their files.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Prng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: modality {found} differs from manifest modality {expected}")]
    MixedModality {
        line: usize,
        expected: Modality,
        found: Modality,
    },
    #[error("test fraction {0} outside (0, 1)")]
    FractionOutOfRange(f64),
    #[error("{n} samples cannot be split at fraction {fraction} into two non-empty parts")]
    TooSmall { n: usize, fraction: f64 },
    #[error("split file: {0}")]
    Split(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Image,
    Audio,
    Video,
    TextOnly,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::TextOnly => "text-only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Member,
    Nonmember,
}

impl Label {
    /// 1 for members, 0 for non-members.
    pub fn as_binary(self) -> u8 {
        match self {
            Label::Member => 1,
            Label::Nonmember => 0,
        }
    }
}

/// One dataset entry: the text `t` (question and answer concatenated) and
/// a reference to the modality payload `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub modality: Modality,
    pub samples: Vec<Sample>,
    /// Directory relative payload paths are resolved against.
    pub base_dir: PathBuf,
}

/// A sample dropped at load time, with the reason.
#[derive(Clone, Debug, PartialEq)]
pub struct Rejected {
    pub line: usize,
    pub id: String,
    pub reason: String,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, modality: Modality, samples: Vec<Sample>) -> Self {
        Self {
            name: name.into(),
            modality,
            samples,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn payload_path(&self, sample: &Sample) -> Option<PathBuf> {
        sample.payload_path.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                self.base_dir.join(p)
            }
        })
    }
}

/// Reads a JSON Lines manifest. Blank lines are skipped. Samples whose
/// payload file is missing are dropped and returned in the rejection list;
/// malformed lines and duplicate ids fail the whole load.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, Vec<Rejected>), DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    let mut modality: Option<Modality> = None;

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if sample.id.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                msg: "empty id".into(),
            });
        }
        if sample.text.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("sample `{}` has empty text", sample.id),
            });
        }
        if !seen.insert(sample.id.clone()) {
            return Err(DataError::DuplicateId {
                line: line_no,
                id: sample.id,
            });
        }
        match modality {
            None => modality = Some(sample.modality),
            Some(m) if m != sample.modality => {
                return Err(DataError::MixedModality {
                    line: line_no,
                    expected: m,
                    found: sample.modality,
                })
            }
            _ => {}
        }
        if sample.modality != Modality::TextOnly {
            let reason = match &sample.payload_path {
                None => Some("payload_path required for non-text modality".to_string()),
                Some(p) => {
                    let full = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                    (!full.is_file()).then(|| format!("payload file {} not found", full.display()))
                }
            };
            if let Some(reason) = reason {
                rejected.push(Rejected {
                    line: line_no,
                    id: sample.id,
                    reason,
                });
                continue;
            }
        }
        samples.push(sample);
    }

    Ok((
        DatasetManifest {
            name,
            modality: modality.unwrap_or(Modality::TextOnly),
            samples,
            base_dir,
        },
        rejected,
    ))
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &manifest.samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(w, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Train/test partition of a manifest. Both id lists follow manifest order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub test_fraction: f64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitAssignment {
    pub fn is_test(&self, id: &str) -> bool {
        self.test_ids.iter().any(|t| t == id)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, json + "\n").map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Split(e.to_string()))
    }
}

/// Number of test items for `n` samples, `round(fraction * n)` with halves rounded up.
pub fn test_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + 0.5).floor() as usize
}

/// Seeded Fisher-Yates over manifest order; the first `round(f * n)` shuffled ids form the test part.
pub fn split_dataset(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::FractionOutOfRange(test_fraction));
    }
    let n = manifest.len();
    let n_test = test_count(n, test_fraction);
    if n < 2 || n_test == 0 || n_test >= n {
        return Err(DataError::TooSmall {
            n,
            fraction: test_fraction,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    Prng::new(seed).shuffle(&mut order);
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train_ids, mut test_ids) = (Vec::new(), Vec::new());
    for (s, t) in manifest.samples.iter().zip(is_test) {
        if t {
            test_ids.push(s.id.clone());
        } else {
            train_ids.push(s.id.clone());
        }
    }
    Ok(SplitAssignment {
        seed,
        test_fraction,
        train_ids,
        test_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn text_manifest(n: usize) -> DatasetManifest {
        let samples = (0..n)
            .map(|i| Sample {
                id: format!("s{i}"),
                text: format!("text {i}"),
                modality: Modality::TextOnly,
                payload_path: None,
                label: None,
            })
            .collect();
        DatasetManifest::new("t", Modality::TextOnly, samples)
    }

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("m.jsonl");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (m, rej) = load_manifest(&write(dir.path(), "")).unwrap();
        assert!(m.is_empty());
        assert!(rej.is_empty());
    }

    #[test]
    fn keeps_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"id":"b","text":"x","modality":"text-only"}
{"id":"a","text":"y","modality":"text-only","label":"member"}
{"id":"c","text":"z","modality":"text-only","label":"nonmember"}
"#;
        let (m, _) = load_manifest(&write(dir.path(), body)).unwrap();
        let ids: Vec<_> = m.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(m.samples[1].label, Some(Label::Member));
    }

    #[test]
    fn duplicate_id_names_id_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"id":"a","text":"x","modality":"text-only"}
{"id":"b","text":"y","modality":"text-only"}
{"id":"a","text":"z","modality":"text-only"}
"#;
        let err = load_manifest(&write(dir.path(), body)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`a`") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"id\":\"a\",\"text\":\"x\",\"modality\":\"text-only\"}\n{oops\n";
        let err = load_manifest(&write(dir.path(), body)).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_payload_is_rejected_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("ok.png"), b"x").unwrap();
        let body = r#"{"id":"a","text":"x","modality":"image","payload_path":"ok.png"}
{"id":"b","text":"y","modality":"image","payload_path":"gone.png"}
"#;
        let (m, rej) = load_manifest(&write(dir.path(), body)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(rej.len(), 1);
        assert_eq!(rej[0].id, "b");
        assert_eq!(rej[0].line, 2);
    }

    #[test]
    fn mixed_modality_fails() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.wav"), b"x").unwrap();
        let body = r#"{"id":"a","text":"x","modality":"text-only"}
{"id":"b","text":"y","modality":"audio","payload_path":"a.wav"}
"#;
        assert!(matches!(
            load_manifest(&write(dir.path(), body)),
            Err(DataError::MixedModality { line: 2, .. })
        ));
    }

    #[test]
    fn ten_percent_of_ten() {
        let s = split_dataset(&text_manifest(10), 0.1, 99).unwrap();
        assert_eq!(s.test_ids.len(), 1);
        assert_eq!(s.train_ids.len(), 9);
    }

    #[test]
    fn split_is_deterministic() {
        let m = text_manifest(37);
        assert_eq!(
            split_dataset(&m, 0.1, 5).unwrap(),
            split_dataset(&m, 0.1, 5).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let m = text_manifest(100);
        let a = split_dataset(&m, 0.1, 1).unwrap();
        let b = split_dataset(&m, 0.1, 2).unwrap();
        assert_ne!(a.test_ids, b.test_ids);
    }

    #[test]
    fn round_half_up() {
        assert_eq!(test_count(5, 0.1), 1); // 0.5 -> 1
        assert_eq!(test_count(14, 0.1), 1);
        assert_eq!(test_count(15, 0.1), 2);
    }

    #[test]
    fn split_errors() {
        let m = text_manifest(10);
        assert!(matches!(split_dataset(&m, 0.0, 1), Err(DataError::FractionOutOfRange(_))));
        assert!(matches!(split_dataset(&m, 1.0, 1), Err(DataError::FractionOutOfRange(_))));
        assert!(matches!(split_dataset(&text_manifest(1), 0.5, 1), Err(DataError::TooSmall { .. })));
        assert!(matches!(split_dataset(&text_manifest(3), 0.1, 1), Err(DataError::TooSmall { .. })));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..200, f in 0.01f64..0.99, seed: u64) {
            let m = text_manifest(n);
            if let Ok(s) = split_dataset(&m, f, seed) {
                prop_assert_eq!(s.test_ids.len(), test_count(n, f));
                let train: HashSet<_> = s.train_ids.iter().collect();
                let test: HashSet<_> = s.test_ids.iter().collect();
                prop_assert!(train.is_disjoint(&test));
                prop_assert_eq!(train.len() + test.len(), n);
            }
        }

        #[test]
        fn manifest_round_trip(texts in proptest::collection::vec("[a-zA-Z0-9 ,.\u{430}-\u{44f}]{1,30}", 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let samples: Vec<Sample> = texts.iter().enumerate().filter(|(_, t)| !t.is_empty()).map(|(i, t)| Sample {
                id: format!("id{i}"),
                text: t.clone(),
                modality: Modality::TextOnly,
                payload_path: None,
                label: if i % 2 == 0 { Some(Label::Member) } else { None },
            }).collect();
            let m = DatasetManifest::new("m", Modality::TextOnly, samples);
            let p = dir.path().join("m.jsonl");
            write_manifest(&m, &p).unwrap();
            let (back, _) = load_manifest(&p).unwrap();
            prop_assert_eq!(&back.samples, &m.samples);
            let p2 = dir.path().join("m2.jsonl");
            write_manifest(&back, &p2).unwrap();
            prop_assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
        }
    }
}
