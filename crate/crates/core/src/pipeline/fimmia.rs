use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;

use rayon::prelude::*;

use super::report::{AttackKind, AuditReport, ConfigEcho, ModelSummary, ReportMetrics, SampleScore};
use super::{
    ensure_dir, is_fresh, write_json, write_stamp, PipelineError, RunConfig, Stamp, StageOutcome, StageStatus,
    MASK_UNIT, NORMALIZER_SOURCE, SCHEMA_VERSION,
};
use crate::attack::{
    build_triplets, leak_fraction, loss_diffs, score_records, train_attack_model, Checkpoint, Normalizer,
    DATASET_LEAK_FRACTION,
};
use crate::backend::{collect_signals, fill_mask, BackendError, CollectOptions, FileBackend, ModelClient, LOSS_CONVENTION};
use crate::data::{split_dataset, DatasetManifest, SplitAssignment};
use crate::metrics::{auc_roc, tpr_at_fpr, ScoredSet, DEFAULT_FPR};
use crate::perturb::{generate_neighbors, read_neighbor_cache, write_neighbor_cache, FillBackend};
use crate::signals::{read_signals, sidecar_path, write_signals, SignalRecord};

/// Where model signals come from.
#[derive(Clone, Copy)]
pub enum SignalSource<'a> {
    /// A live (or stub) model service; neighbors are generated and queried.
    Client(&'a dyn ModelClient),
    /// Precomputed records that already include neighbor signals.
    File(&'a FileBackend),
}

struct Filler<'a>(&'a dyn ModelClient);

impl FillBackend for Filler<'_> {
    fn fill(&self, masked_text: &str) -> Result<String, BackendError> {
        fill_mask(self.0, masked_text)
    }
}

pub(crate) fn manifest_digest(manifest: &DatasetManifest) -> String {
    Stamp::new("manifest").json(&manifest.samples).finish()
}

/// Splits the dataset and, for a model service, generates the neighbor cache.
pub fn run_neighbors(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    source: SignalSource,
) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let paths = cfg.paths();
    let file_only = matches!(source, SignalSource::File(_));
    let stamp = Stamp::new("neighbors")
        .json(&manifest.samples)
        .json(&(cfg.seed, cfg.k, cfg.test_fraction, cfg.rates, file_only))
        .finish();
    let (split_path, nb_path) = (paths.split(), paths.neighbors());
    if is_fresh(&split_path, &stamp) && (file_only || is_fresh(&nb_path, &stamp)) {
        return Ok(StageOutcome::up_to_date());
    }
    ensure_dir(&split_path)?;
    let split = split_dataset(manifest, cfg.test_fraction, cfg.seed)?;
    split.save(&split_path)?;
    let mut notes = vec![format!(
        "split: {} train, {} test",
        split.train_ids.len(),
        split.test_ids.len()
    )];
    if let SignalSource::Client(client) = source {
        let filler = Filler(client);
        let sets = manifest
            .samples
            .par_iter()
            .map(|s| generate_neighbors(s, cfg.k, &cfg.rates, cfg.seed, &filler))
            .collect::<Result<Vec<_>, _>>()?;
        write_neighbor_cache(&sets, &nb_path)?;
        write_stamp(&nb_path, &stamp)?;
        notes.push(format!("{} neighbor sets of {}", sets.len(), cfg.k));
    }
    write_stamp(&split_path, &stamp)?;
    Ok(StageOutcome {
        status: StageStatus::Ran,
        notes,
    })
}

/// Loss and embedding signals of every model the run needs.
pub fn run_collect(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    source: SignalSource,
) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let paths = cfg.paths();
    let neighbors = match source {
        SignalSource::Client(_) => {
            let p = paths.neighbors();
            if !p.exists() {
                return Err(PipelineError::MissingUpstream {
                    path: p,
                    stage: "neighbors",
                });
            }
            Some(read_neighbor_cache(&p)?)
        }
        SignalSource::File(_) => None,
    };
    let mut notes = Vec::new();
    let mut ran = false;
    for model in cfg.models.all() {
        let out = paths.signals(&model);
        let stamp = Stamp::new("collect")
            .json(&manifest.samples)
            .json(&(&model, cfg.k, cfg.failure_budget));
        let stamp = match source {
            SignalSource::Client(_) => stamp.file(&paths.neighbors(), "neighbors")?,
            SignalSource::File(fb) => stamp.file(fb.path(), "collect")?,
        }
        .finish();
        if is_fresh(&out, &stamp) {
            continue;
        }
        ensure_dir(&out)?;
        let records = match source {
            SignalSource::Client(client) => {
                let partial = paths.partial(&model);
                // progress from a run with other inputs must not be resumed
                if partial.exists() && !is_fresh(&partial, &stamp) {
                    fs::remove_file(&partial).map_err(|e| PipelineError::io(&partial, e))?;
                }
                write_stamp(&partial, &stamp)?;
                let opts = CollectOptions {
                    jobs: cfg.jobs,
                    failure_budget: cfg.failure_budget,
                    partial: Some(partial.clone()),
                    ..CollectOptions::new(cfg.k)
                };
                let got = collect_signals(client, manifest, neighbors.as_deref().unwrap_or(&[]), &model, &opts)?;
                if got.resumed > 0 {
                    notes.push(format!("{model}: resumed {} samples", got.resumed));
                }
                for f in &got.failures {
                    notes.push(format!("{model}: skipped `{}`: {}", f.sample_id, f.error));
                }
                got.records
            }
            SignalSource::File(fb) => fb.collect(manifest, &model, cfg.k)?,
        };
        write_signals(&records, &out)?;
        write_stamp(&out, &stamp)?;
        let partial = paths.partial(&model);
        let _ = fs::remove_file(&partial);
        let _ = fs::remove_file(super::stamp_path(&partial));
        notes.push(format!("{model}: {} records", records.len()));
        ran = true;
    }
    Ok(StageOutcome {
        status: if ran { StageStatus::Ran } else { StageStatus::UpToDate },
        notes,
    })
}

fn signal_stamp(stamp: Stamp, cfg: &RunConfig, model: &str) -> Result<Stamp, PipelineError> {
    let p = cfg.paths().signals(model);
    stamp.file(&p, "collect")?.file(&sidecar_path(&p), "collect")
}

fn train_part<'a>(records: &'a [SignalRecord], split: &SplitAssignment) -> Vec<&'a SignalRecord> {
    let test: HashSet<&str> = split.test_ids.iter().map(String::as_str).collect();
    records.iter().filter(|r| !test.contains(r.sample_id.as_str())).collect()
}

/// Fits per-model normalizers on the train part and trains the detector.
pub fn run_train(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let paths = cfg.paths();
    let (clean_id, leak_id) = (&cfg.models.clean, &cfg.models.leak);
    let stamp = Stamp::new("train")
        .json(&cfg.train)
        .json(&(clean_id, leak_id))
        .file(&paths.split(), "neighbors")?;
    let stamp = signal_stamp(signal_stamp(stamp, cfg, clean_id)?, cfg, leak_id)?.finish();
    let ckpt_path = paths.checkpoint();
    if is_fresh(&ckpt_path, &stamp) {
        return Ok(StageOutcome::up_to_date());
    }

    let split = SplitAssignment::load(&paths.split())?;
    let clean = read_signals(&paths.signals(clean_id))?;
    let leak = read_signals(&paths.signals(leak_id))?;
    let (clean_train, leak_train) = (train_part(&clean, &split), train_part(&leak, &split));
    let norm_clean = Normalizer::fit(&loss_diffs(clean_train.iter().copied()))?;
    let norm_leak = Normalizer::fit(&loss_diffs(leak_train.iter().copied()))?;

    let leak_by_id: HashMap<&str, &SignalRecord> = leak_train.iter().map(|r| (r.sample_id.as_str(), *r)).collect();
    let mut triplets = Vec::new();
    let mut paired = 0;
    for c in &clean_train {
        if let Some(l) = leak_by_id.get(c.sample_id.as_str()) {
            triplets.extend(build_triplets(c, l, &norm_clean, &norm_leak)?);
            paired += 1;
        }
    }
    let outcome = train_attack_model(&triplets, &cfg.train)?;

    let mut notes = vec![format!("{paired} train samples, {} triplets", triplets.len())];
    for (epoch, loss) in outcome.loss_trace.iter().enumerate() {
        notes.push(format!("epoch {epoch}: mean loss {loss:.6}"));
    }
    let mut normalizers = BTreeMap::new();
    normalizers.insert(clean_id.clone(), norm_clean);
    normalizers.insert(leak_id.clone(), norm_leak);
    let ckpt = Checkpoint {
        net: outcome.net,
        train_config: cfg.train.clone(),
        normalizers,
        loss_trace: outcome.loss_trace,
    };
    ckpt.save(&ckpt_path)?;
    write_stamp(&ckpt_path, &stamp)?;
    Ok(StageOutcome {
        status: StageStatus::Ran,
        notes,
    })
}

/// Scores the test part under every target model and writes the report.
pub fn run_score(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<(StageOutcome, AuditReport), PipelineError> {
    cfg.validate()?;
    let paths = cfg.paths();
    let targets = cfg.models.targets();
    let mut stamp = Stamp::new("score")
        .json(cfg)
        .json(&manifest.name)
        .json(&manifest.samples)
        .file(&paths.checkpoint(), "train")?
        .file(&paths.split(), "neighbors")?;
    for t in &targets {
        stamp = signal_stamp(stamp, cfg, &t.model)?;
    }
    let stamp = stamp.finish();
    let report_path = paths.report();
    if is_fresh(&report_path, &stamp) {
        return Ok((StageOutcome::up_to_date(), super::load_report(&report_path)?));
    }

    let ckpt = Checkpoint::load(&paths.checkpoint())?;
    let split = SplitAssignment::load(&paths.split())?;
    let test: HashSet<&str> = split.test_ids.iter().map(String::as_str).collect();
    let labels: HashMap<&str, u8> = manifest
        .samples
        .iter()
        .filter_map(|s| s.label.map(|l| (s.id.as_str(), l.as_binary())))
        .collect();

    let mut scores = Vec::new();
    let mut per_model = Vec::new();
    let mut notes = Vec::new();
    for t in &targets {
        let records = read_signals(&paths.signals(&t.model))?;
        let norm = match ckpt.normalizers.get(&t.model) {
            Some(n) => *n,
            None => Normalizer::fit(&loss_diffs(train_part(&records, &split)))?,
        };
        let held_out: Vec<SignalRecord> = records
            .into_iter()
            .filter(|r| test.contains(r.sample_id.as_str()))
            .collect();
        let a = score_records(&ckpt.net, &held_out, &norm)?;
        let lf = leak_fraction(&a, cfg.leak_threshold)?;
        per_model.push(ModelSummary {
            model_id: t.model.clone(),
            n_samples: a.len(),
            mean_score: a.iter().sum::<f64>() / a.len() as f64,
            leak_fraction: lf,
            dataset_leaked: lf > DATASET_LEAK_FRACTION,
        });
        notes.push(format!("{}: {} test samples, leak fraction {lf:.4}", t.model, a.len()));
        for (r, score) in held_out.iter().zip(a) {
            scores.push(SampleScore {
                sample_id: r.sample_id.clone(),
                model_id: Some(t.model.clone()),
                score,
                label: t
                    .leaked
                    .map(u8::from)
                    .or_else(|| labels.get(r.sample_id.as_str()).copied()),
            });
        }
    }

    let all: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let lf = leak_fraction(&all, cfg.leak_threshold)?;
    let (auc, tpr) = match scores.iter().map(|s| s.label).collect::<Option<Vec<u8>>>() {
        Some(l) if l.contains(&0) && l.contains(&1) => {
            let set = ScoredSet::new(all, l.into_iter().map(|y| y == 1).collect())?;
            (Some(auc_roc(&set)?), Some(tpr_at_fpr(&set, DEFAULT_FPR)?))
        }
        _ => {
            notes.push("labels missing or single-class: AUC and TPR not computed".into());
            (None, None)
        }
    };
    let report = AuditReport {
        schema_version: SCHEMA_VERSION,
        dataset: manifest.name.clone(),
        modality: manifest.modality,
        attack: AttackKind::Fimmia,
        origin_model: Some(cfg.models.leak.clone()),
        test_model: Some(targets.iter().map(|t| t.model.as_str()).collect::<Vec<_>>().join("+")),
        metrics: ReportMetrics {
            auc,
            tpr_at_fpr_5: tpr,
            leak_fraction: Some(lf),
            dataset_leaked: Some(lf > DATASET_LEAK_FRACTION),
        },
        per_model,
        baseline: None,
        scores,
        config: ConfigEcho {
            run: cfg.echo(),
            loss_convention: LOSS_CONVENTION.into(),
            mask_unit: MASK_UNIT.into(),
            normalizer_source: NORMALIZER_SOURCE.into(),
            schema_id: None,
            dataset_sha256: manifest_digest(manifest),
        },
    };
    write_json(&report_path, &report)?;
    write_stamp(&report_path, &stamp)?;
    Ok((
        StageOutcome {
            status: StageStatus::Ran,
            notes,
        },
        report,
    ))
}
