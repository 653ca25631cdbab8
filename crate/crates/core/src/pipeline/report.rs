use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, RunConfig, SCHEMA_VERSION};
use crate::data::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    BlindBaseline,
    Fimmia,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::BlindBaseline => "blind_baseline",
            AttackKind::Fimmia => "fimmia",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub auc: Option<f64>,
    pub tpr_at_fpr_5: Option<f64>,
    pub leak_fraction: Option<f64>,
    /// Leak fraction above the dataset-level flag.
    pub dataset_leaked: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub n_samples: usize,
    pub mean_score: f64,
    pub leak_fraction: f64,
    pub dataset_leaked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// Settings needed to reproduce a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub run: RunConfig,
    pub loss_convention: String,
    pub mask_unit: String,
    pub normalizer_source: String,
    pub schema_id: Option<String>,
    pub dataset_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub dataset: String,
    pub modality: Modality,
    pub attack: AttackKind,
    /// Model whose leak the detector was trained to recognise.
    pub origin_model: Option<String>,
    /// Audited models, `+`-joined.
    pub test_model: Option<String>,
    pub metrics: ReportMetrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_model: Vec<ModelSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<crate::shallow::BaselineReport>,
    pub scores: Vec<SampleScore>,
    pub config: ConfigEcho,
}

/// Reads a report, rejecting other schema versions before parsing the body.
pub fn load_report(path: &Path) -> Result<AuditReport, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| PipelineError::io(path, e))?;
    match v.get("schema_version").and_then(|s| s.as_u64()) {
        Some(n) if n == u64::from(SCHEMA_VERSION) => {}
        Some(n) => {
            return Err(PipelineError::Report(format!(
                "{} has schema_version {n}, this build reads {SCHEMA_VERSION}",
                path.display()
            )))
        }
        None => return Err(PipelineError::Report(format!("{} has no schema_version", path.display()))),
    }
    serde_json::from_value(v).map_err(|e| PipelineError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub origin: String,
    pub test: String,
    pub dataset: String,
    pub modality: Modality,
    pub attack: AttackKind,
    pub auc: Option<f64>,
    pub tpr_at_fpr_5: Option<f64>,
    pub leak_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityAverage {
    pub attack: AttackKind,
    pub modality: Modality,
    pub mean_auc: f64,
    pub n_reports: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consolidated {
    pub schema_version: u32,
    pub rows: Vec<ReportRow>,
    pub averages: Vec<ModalityAverage>,
}

fn modality_key(m: Modality) -> u8 {
    match m {
        Modality::Image => 0,
        Modality::Audio => 1,
        Modality::Video => 2,
        Modality::TextOnly => 3,
    }
}

/// One row per report, then the mean AUC of each (attack, modality) group.
pub fn consolidate(reports: &[AuditReport]) -> Result<Consolidated, PipelineError> {
    if reports.is_empty() {
        return Err(PipelineError::Report("no reports given".into()));
    }
    if let Some(r) = reports.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(PipelineError::Report(format!(
            "report for `{}` has schema_version {}, expected {SCHEMA_VERSION}",
            r.dataset, r.schema_version
        )));
    }
    let rows: Vec<ReportRow> = reports
        .iter()
        .map(|r| ReportRow {
            origin: r.origin_model.clone().unwrap_or_else(|| "-".into()),
            test: r.test_model.clone().unwrap_or_else(|| "-".into()),
            dataset: r.dataset.clone(),
            modality: r.modality,
            attack: r.attack,
            auc: r.metrics.auc,
            tpr_at_fpr_5: r.metrics.tpr_at_fpr_5,
            leak_fraction: r.metrics.leak_fraction,
        })
        .collect();
    let mut groups: BTreeMap<(AttackKind, u8), (Modality, Vec<f64>)> = BTreeMap::new();
    for row in &rows {
        if let Some(auc) = row.auc {
            groups
                .entry((row.attack, modality_key(row.modality)))
                .or_insert_with(|| (row.modality, Vec::new()))
                .1
                .push(auc);
        }
    }
    let averages = groups
        .into_iter()
        .map(|((attack, _), (modality, aucs))| ModalityAverage {
            attack,
            modality,
            mean_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
            n_reports: aucs.len(),
        })
        .collect();
    Ok(Consolidated {
        schema_version: SCHEMA_VERSION,
        rows,
        averages,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl Consolidated {
    /// Plain-text table of rows followed by the averages.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<16} {:<20} {:<9} {:<14} {:>8} {:>8} {:>8}",
            "origin", "test", "dataset", "modality", "attack", "auc", "tpr@5%", "leaked"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:<16} {:<20} {:<9} {:<14} {:>8} {:>8} {:>8}",
                r.origin,
                r.test,
                r.dataset,
                r.modality.to_string(),
                r.attack.to_string(),
                cell(r.auc),
                cell(r.tpr_at_fpr_5),
                cell(r.leak_fraction)
            );
        }
        let _ = writeln!(out);
        for a in &self.averages {
            let _ = writeln!(
                out,
                "average {:<14} {:<9} auc {:.4} over {} report(s)",
                a.attack.to_string(),
                a.modality.to_string(),
                a.mean_auc,
                a.n_reports
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn report(dataset: &str, modality: Modality, auc: Option<f64>) -> AuditReport {
        AuditReport {
            schema_version: SCHEMA_VERSION,
            dataset: dataset.into(),
            modality,
            attack: AttackKind::Fimmia,
            origin_model: Some("leak".into()),
            test_model: Some("leak+clean".into()),
            metrics: ReportMetrics {
                auc,
                tpr_at_fpr_5: None,
                leak_fraction: Some(0.5),
                dataset_leaked: Some(true),
            },
            per_model: vec![],
            baseline: None,
            scores: vec![],
            config: ConfigEcho {
                run: RunConfig::new("d", ""),
                loss_convention: "mean_token_nll".into(),
                mask_unit: "token".into(),
                normalizer_source: "train_part".into(),
                schema_id: None,
                dataset_sha256: String::new(),
            },
        }
    }

    #[test]
    fn single_report_is_its_own_average() {
        let c = consolidate(&[report("a", Modality::Image, Some(0.8))]).unwrap();
        assert_eq!(c.rows.len(), 1);
        assert_eq!(c.averages.len(), 1);
        assert_eq!(c.averages[0].mean_auc, 0.8);
    }

    #[test]
    fn averages_per_modality_by_hand() {
        let c = consolidate(&[
            report("a", Modality::Image, Some(0.9)),
            report("b", Modality::Audio, Some(0.6)),
            report("c", Modality::Image, Some(0.7)),
        ])
        .unwrap();
        let image = c.averages.iter().find(|a| a.modality == Modality::Image).unwrap();
        let audio = c.averages.iter().find(|a| a.modality == Modality::Audio).unwrap();
        assert!((image.mean_auc - 0.8).abs() < 1e-15);
        assert_eq!((image.n_reports, audio.mean_auc), (2, 0.6));
        assert!(c.render().contains("average fimmia"));
    }

    #[test]
    fn mixed_schema_versions_are_rejected() {
        let mut old = report("a", Modality::Image, Some(0.9));
        old.schema_version = 0;
        assert!(consolidate(&[report("b", Modality::Image, None), old]).is_err());
        assert!(consolidate(&[]).is_err());
    }

    #[test]
    fn loading_checks_schema_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        fs::write(&p, r#"{"schema_version": 99, "whatever": true}"#).unwrap();
        assert!(matches!(load_report(&p), Err(PipelineError::Report(_))));
        let r = report("a", Modality::Image, Some(0.5));
        fs::write(&p, serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(load_report(&p).unwrap(), r);
    }
}
