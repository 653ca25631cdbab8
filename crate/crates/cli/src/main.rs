use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fimmia::backend::{BackendConfig, BackendError, BackendKind, CachedClient, FileBackend, HttpClient};
use fimmia::data::{load_manifest, DatasetManifest};
use fimmia::pipeline::{
    consolidate, load_report, run_baseline, run_collect, run_neighbors, run_score, run_train, AuditReport,
    PipelineError, RunConfig, SignalSource, StageOutcome, StageStatus,
};

/// Membership-inference audits for multimodal models.
#[derive(Parser)]
#[command(name = "fimmia", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Every flag overrides the same key in the config file.
#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset manifest (JSON Lines).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Directory for stage artifacts.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Model service URL, or a precomputed signals file.
    #[arg(long, global = true)]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Blind baseline: can member and non-member samples be told apart without a model?
    AuditBaseline,
    /// Generate perturbed neighbors and the train/test split.
    Neighbors,
    /// Query losses and embeddings for every sample and neighbor.
    Collect,
    /// Train the detector.
    Train,
    /// Score the test part with the trained detector.
    Score,
    /// Consolidate audit reports into one table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the consolidated table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn backend_from_flag(spec: &str) -> BackendConfig {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        BackendConfig::http(spec)
    } else {
        BackendConfig::file(spec)
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            cfg
        }
        None => {
            let dataset = g.dataset.clone().context("no dataset: pass --dataset or --config")?;
            RunConfig::new(dataset, PathBuf::new())
        }
    };
    if let Some(d) = &g.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(w) = &g.workdir {
        cfg.workdir = w.clone();
    }
    if cfg.workdir.as_os_str().is_empty() {
        cfg.workdir = PathBuf::from("fimmia-run");
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    if let Some(b) = &g.backend {
        cfg.backend = Some(backend_from_flag(b));
    }
    if cfg.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let (m, rejected) = load_manifest(&cfg.dataset)?;
    for r in &rejected {
        eprintln!("warning: line {}: dropped `{}`: {}", r.line, r.id, r.reason);
    }
    Ok(m)
}

fn show(stage: &str, out: &StageOutcome) {
    let status = match out.status {
        StageStatus::Ran => "done",
        StageStatus::UpToDate => "up to date",
    };
    eprintln!("{stage}: {status}");
    for n in &out.notes {
        eprintln!("  {n}");
    }
}

fn summary(r: &AuditReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} on {}: auc {} tpr@5%fpr {}",
        serde_json::to_value(r.attack).map(|v| v.as_str().unwrap_or_default().to_string()).unwrap_or_default(),
        r.dataset,
        fmt(r.metrics.auc),
        fmt(r.metrics.tpr_at_fpr_5)
    );
    if let Some(lf) = r.metrics.leak_fraction {
        println!(
            "leak fraction {lf:.4}, dataset leaked: {}",
            r.metrics.dataset_leaked.map_or("n/a", |b| if b { "yes" } else { "no" })
        );
    }
}

/// Runs `f` against the configured model service or signals file.
fn with_source<T>(cfg: &RunConfig, f: impl FnOnce(SignalSource) -> Result<T, PipelineError>) -> Result<T> {
    let backend = cfg
        .backend
        .as_ref()
        .context("no backend: pass --backend <url|signals file> or set [backend] in the config")?;
    let out = match &backend.kind {
        BackendKind::File { path } => f(SignalSource::File(&FileBackend::open(path)?)),
        BackendKind::Http { .. } => {
            let http = HttpClient::from_config(backend)?;
            match &backend.cache {
                Some(cache) => f(SignalSource::Client(&CachedClient::with_file(http, cache)?)),
                None => f(SignalSource::Client(&http)),
            }
        }
    };
    Ok(out?)
}

fn report(paths: &[PathBuf], json: Option<&Path>) -> Result<()> {
    let reports = paths.iter().map(|p| load_report(p)).collect::<Result<Vec<_>, _>>()?;
    let table = consolidate(&reports)?;
    print!("{}", table.render());
    if let Some(out) = json {
        let text = serde_json::to_string_pretty(&table)?;
        std::fs::write(out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { reports, json } = &cli.command {
        return report(reports, json.as_deref());
    }
    let cfg = load_config(&cli.global)?;
    rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global()?;
    match cli.command {
        Command::AuditBaseline => {
            let (out, r) = run_baseline(&cfg, &manifest(&cfg)?)?;
            show("audit-baseline", &out);
            summary(&r);
            println!("report: {}", cfg.paths().baseline_report().display());
        }
        Command::Neighbors => {
            let m = manifest(&cfg)?;
            show("neighbors", &with_source(&cfg, |src| run_neighbors(&cfg, &m, src))?);
        }
        Command::Collect => {
            let m = manifest(&cfg)?;
            show("collect", &with_source(&cfg, |src| run_collect(&cfg, &m, src))?);
        }
        Command::Train => show("train", &run_train(&cfg)?),
        Command::Score => {
            let (out, r) = run_score(&cfg, &manifest(&cfg)?)?;
            show("score", &out);
            summary(&r);
            println!("report: {}", cfg.paths().report().display());
        }
        Command::Report { .. } => unreachable!(),
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::Labels(_) => 2,
                PipelineError::Extraction { .. } => 3,
                PipelineError::MissingUpstream { .. } => 4,
                PipelineError::Backend(BackendError::FailureBudget { .. }) => 5,
                _ => 1,
            };
        }
        if let Some(BackendError::FailureBudget { .. }) = cause.downcast_ref::<BackendError>() {
            return 5;
        }
    }
    1
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
