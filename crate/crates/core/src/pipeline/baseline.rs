use rayon::prelude::*;

use super::fimmia::manifest_digest;
use super::report::{AttackKind, AuditReport, ConfigEcho, ReportMetrics, SampleScore};
use super::{
    ensure_dir, is_fresh, load_report, write_json, write_stamp, PipelineError, RunConfig, Stamp, StageOutcome, StageStatus,
    MASK_UNIT, NORMALIZER_SOURCE, SCHEMA_VERSION,
};
use crate::backend::LOSS_CONVENTION;
use crate::data::{DatasetManifest, Modality, Sample};
use crate::features::text::text_features;
use crate::features::{AudioClip, FeatureError, FeatureMatrix, FeatureVector, RgbImage};
use crate::metrics::{tpr_at_fpr, ScoredSet, DEFAULT_FPR};
use crate::rng::Prng;
use crate::shallow::{cross_validated_scores, kmeans_fit, Codebook};

fn payload_path(manifest: &DatasetManifest, s: &Sample) -> Result<std::path::PathBuf, FeatureError> {
    manifest
        .payload_path(s)
        .ok_or_else(|| FeatureError::Unsupported(format!("sample `{}` has no payload", s.id)))
}

/// Descriptor subsample of every loaded image, pooled for the codebook.
fn fit_codebook(
    cfg: &RunConfig,
    images: &[(usize, RgbImage)],
) -> Result<Codebook, PipelineError> {
    let img_cfg = &cfg.baseline.image;
    let quota = cfg.baseline.codebook_sample.div_ceil(images.len().max(1)).max(1);
    let pooled: Vec<Vec<f64>> = images
        .par_iter()
        .map(|(i, img)| {
            let mut d = img_cfg.descriptors(img);
            let mut r = Prng::derived(cfg.seed, &[b"codebook-sample", &(*i as u64).to_le_bytes()]);
            r.shuffle(&mut d);
            d.truncate(quota);
            d
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let fit = kmeans_fit(&pooled, img_cfg.codebook_size, cfg.seed, cfg.baseline.kmeans_iter)?;
    Ok(fit.codebook)
}

/// Per-sample features; `Err` entries are extraction failures.
fn extract_all(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
) -> Result<(String, usize, Vec<Result<FeatureVector, String>>), PipelineError> {
    let b = &cfg.baseline;
    let fail = |s: &Sample, e: FeatureError| format!("{}: {e}", s.id);
    match manifest.modality {
        Modality::Image => {
            let loaded: Vec<Result<RgbImage, String>> = manifest
                .samples
                .par_iter()
                .map(|s| payload_path(manifest, s).and_then(|p| RgbImage::load(&p)).map_err(|e| fail(s, e)))
                .collect();
            let ok: Vec<(usize, RgbImage)> = loaded
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.as_ref().ok().map(|img| (i, img.clone())))
                .collect();
            let codebook = fit_codebook(cfg, &ok)?;
            drop(ok);
            let out = loaded
                .into_par_iter()
                .zip(&manifest.samples)
                .map(|(img, s)| img.and_then(|img| b.image.extract(&img, &codebook).map_err(|e| fail(s, e))))
                .collect::<Vec<_>>();
            let n = 256 + b.image.codebook_size + b.image.dct_block * b.image.dct_block + 3 * b.image.hsv_bins;
            Ok((b.image.schema_id(), n, out))
        }
        Modality::Audio => {
            let out = manifest
                .samples
                .par_iter()
                .map(|s| {
                    payload_path(manifest, s)
                        .and_then(|p| AudioClip::load_wav(&p, b.audio.sample_rate))
                        .and_then(|clip| b.audio.extract(&clip))
                        .map_err(|e| fail(s, e))
                })
                .collect();
            Ok((b.audio.schema_id(), b.audio.len(), out))
        }
        Modality::TextOnly => {
            let out: Vec<_> = manifest.samples.par_iter().map(|s| Ok(text_features(&s.text))).collect();
            let (schema, n) = out
                .first()
                .and_then(|r: &Result<FeatureVector, String>| r.as_ref().ok())
                .map_or((String::new(), 0), |v| (v.schema_id.clone(), v.len()));
            Ok((schema, n, out))
        }
        Modality::Video => Err(PipelineError::Config(
            "the blind baseline has no video features; audit video datasets with the FiMMIA stages".into(),
        )),
    }
}

/// Blind baseline: membership predicted from dataset features alone with
/// cross-validated logistic regression. A high AUC means the member and
/// non-member splits are distinguishable without any model.
pub fn run_baseline(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<(StageOutcome, AuditReport), PipelineError> {
    let b = &cfg.baseline;
    let labels: Vec<bool> = manifest
        .samples
        .iter()
        .map(|s| {
            s.label
                .map(|l| l.as_binary() == 1)
                .ok_or_else(|| PipelineError::Labels(format!("sample `{}` has no member/nonmember label", s.id)))
        })
        .collect::<Result<_, _>>()?;
    let members = labels.iter().filter(|&&l| l).count();
    let nonmembers = labels.len() - members;
    if members < b.folds || nonmembers < b.folds {
        return Err(PipelineError::Labels(format!(
            "{members} members and {nonmembers} non-members; each class needs at least {} for {}-fold CV",
            b.folds, b.folds
        )));
    }

    let paths = cfg.paths();
    let out = paths.baseline_report();
    let mut stamp = Stamp::new("baseline")
        .json(&manifest.samples)
        .json(&manifest.modality)
        .json(&(cfg.seed, b));
    for s in &manifest.samples {
        if let Some(p) = manifest.payload_path(s) {
            // unreadable payloads are extraction failures, not missing upstream
            stamp = stamp.bytes(&std::fs::read(&p).unwrap_or_default());
        }
    }
    let stamp = stamp.finish();
    if is_fresh(&out, &stamp) {
        return Ok((StageOutcome::up_to_date(), load_report(&out)?));
    }

    let (schema_id, n_cols, features) = extract_all(cfg, manifest)?;
    let failures: Vec<&String> = features.iter().filter_map(|r| r.as_ref().err()).collect();
    if failures.len() as f64 > b.failure_budget * features.len() as f64 {
        return Err(PipelineError::Extraction {
            failed: failures.len(),
            total: features.len(),
            first: failures[0].clone(),
        });
    }
    let mut notes: Vec<String> = failures.iter().map(|f| format!("skipped {f}")).collect();

    let mut matrix = FeatureMatrix::new(&schema_id, n_cols);
    let (mut rows, mut y, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for ((s, f), &label) in manifest.samples.iter().zip(&features).zip(&labels) {
        if let Ok(v) = f {
            matrix.push(&s.id, v)?;
            rows.push(v.values.clone());
            y.push(label);
            ids.push(s.id.clone());
        }
    }
    ensure_dir(&paths.features())?;
    matrix.save(&paths.features())?;
    let (mut rep, scores) = cross_validated_scores(&rows, &y, b.folds, cfg.seed, &b.logreg)?;
    rep.dataset = manifest.name.clone();
    rep.schema_id = schema_id.clone();
    let tpr = tpr_at_fpr(&ScoredSet::new(scores.clone(), y.clone())?, DEFAULT_FPR)?;
    notes.push(format!(
        "{} rows of {n_cols} features, AUC {:.4} +- {:.4} over {} folds",
        rows.len(),
        rep.mean_auc,
        rep.std_auc,
        b.folds
    ));

    let report = AuditReport {
        schema_version: SCHEMA_VERSION,
        dataset: manifest.name.clone(),
        modality: manifest.modality,
        attack: AttackKind::BlindBaseline,
        origin_model: None,
        test_model: None,
        metrics: ReportMetrics {
            auc: Some(rep.mean_auc),
            tpr_at_fpr_5: Some(tpr),
            leak_fraction: None,
            dataset_leaked: None,
        },
        per_model: Vec::new(),
        baseline: Some(rep),
        scores: ids
            .into_iter()
            .zip(scores)
            .zip(&y)
            .map(|((sample_id, score), &l)| SampleScore {
                sample_id,
                model_id: None,
                score,
                label: Some(u8::from(l)),
            })
            .collect(),
        config: ConfigEcho {
            run: cfg.echo(),
            loss_convention: LOSS_CONVENTION.into(),
            mask_unit: MASK_UNIT.into(),
            normalizer_source: NORMALIZER_SOURCE.into(),
            schema_id: Some(schema_id),
            dataset_sha256: manifest_digest(manifest),
        },
    };
    write_json(&out, &report)?;
    write_stamp(&out, &stamp)?;
    Ok((
        StageOutcome {
            status: StageStatus::Ran,
            notes,
        },
        report,
    ))
}
