use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use latode::checkpoint::{sha256_hex, Checkpoint};
use latode::data::{demo_patients, export_json, gen_icu, gen_spirals, ingest_file, split, IngestOptions};
use latode::eval::{evaluate, summary_baseline_auc, EvalMetrics};
use latode::model::IrregularSeries;
use latode::odeint::Tolerances;
use latode::training::{train_with_callback, TrainConfig};
use latode::trajectory::{export_ensemble, sample_ensemble, EnsembleOptions};
use latode_service::{AppState, ServerConfig};

use crate::config::{load, DataKind, GenDataConfig};
use crate::manifest::{write_file, Manifest};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<latode::Error> for CliError {
    fn from(e: latode::Error) -> Self {
        use latode::Error::*;
        match e {
            Validation { .. } | Contract(_) | Parse { .. } | Checkpoint(_) => CliError::invalid(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {}", dir.display(), e)))
}

fn read_series(path: &Path, stats: Option<&Checkpoint>) -> Result<Vec<IrregularSeries>, CliError> {
    let opts = IngestOptions { stats: stats.map(|c| c.norm_stats.clone()), ..IngestOptions::default() };
    let ingested = ingest_file(path, &opts).map_err(|e| match e {
        latode::Error::Io(m) => CliError::runtime(format!("{}: {}", path.display(), m)),
        other => CliError::from(other),
    })?;
    for w in &ingested.warnings {
        tracing::warn!("{}: line {} ({}): {}", path.display(), w.line, w.series_id, w.message);
    }
    Ok(ingested.series)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::runtime(format!("{}: {}", path.display(), e)))?;
    Ok((Checkpoint::from_bytes(&bytes)?, sha256_hex(&bytes)))
}

pub fn gen_data(config: Option<PathBuf>, overrides: &[String], out_dir: &Path) -> Result<(), CliError> {
    let cfg: GenDataConfig = load(config.as_deref(), overrides)?;
    if !(0.0..1.0).contains(&cfg.test_share) {
        return Err(CliError::invalid("test_share must lie in [0, 1)"));
    }
    let series = match cfg.kind {
        DataKind::Spirals => gen_spirals(&cfg.spirals)?,
        DataKind::Icu => gen_icu(&cfg.icu)?,
    };
    let (train, test) = split(&series, cfg.test_share, cfg.split_seed)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("train.json"), export_json(&train).as_bytes())?;
    let mut names = vec!["train.json"];
    if !test.is_empty() {
        write_file(&out_dir.join("test.json"), export_json(&test).as_bytes())?;
        names.push("test.json");
    }
    if cfg.kind == DataKind::Icu {
        write_file(&out_dir.join("demo.json"), export_json(&demo_patients()).as_bytes())?;
        names.push("demo.json");
    }
    tracing::info!("wrote {} training and {} test series to {}", train.len(), test.len(), out_dir.display());
    Manifest::new("gen-data", &cfg, Some(cfg.seed())).write(out_dir, &names)
}

pub fn train(
    config: Option<PathBuf>,
    overrides: &[String],
    data: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let cfg: TrainConfig = load(config.as_deref(), overrides)?;
    cfg.validate()?;
    let series = read_series(data, None)?;
    create_dir(out_dir)?;
    let outcome = train_with_callback(&series, &cfg, |r| {
        tracing::info!(
            "epoch {:>3}  kl {:.2}  train {:.3}  val {:.3}  val mse {:.4}  val auc {}",
            r.epoch,
            r.kl_weight,
            r.train_loss,
            r.validation_loss,
            r.validation_mse,
            r.validation_auc.map_or("-".into(), |a| format!("{:.3}", a))
        );
    })?;
    let mut ck = outcome.checkpoint;
    ck.metadata.insert("config_hash".into(), Manifest::new("train", &cfg, None).config_hash);
    ck.save(out_dir.join("model.ckpt"))?;
    write_file(&out_dir.join("train_log.jsonl"), outcome.report.to_json_lines().as_bytes())?;
    let report = serde_json::json!({
        "best_epoch": outcome.report.best_epoch,
        "epochs_run": outcome.report.epochs.len(),
        "wall_clock_secs": outcome.report.wall_clock_secs,
        "checkpoint": "model.ckpt",
        "checkpoint_hash": ck.hash(),
    });
    write_file(&out_dir.join("report.json"), (serde_json::to_string_pretty(&report).unwrap() + "\n").as_bytes())?;
    tracing::info!("best epoch {}; checkpoint {}", outcome.report.best_epoch, ck.hash());
    Manifest::new("train", &cfg, Some(cfg.seed)).input(data)?.write(out_dir, &["model.ckpt", "train_log.jsonl", "report.json"])
}

#[derive(Debug, Serialize)]
struct EvalDocument {
    #[serde(flatten)]
    metrics: EvalMetrics,
    checkpoint_hash: String,
    baseline_auc: Option<f64>,
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    baseline_train: Option<&Path>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let (ck, hash) = load_checkpoint(checkpoint)?;
    let test = read_series(data, Some(&ck))?;
    if test.is_empty() {
        return Err(CliError::invalid(format!("{} holds no series", data.display())));
    }
    let metrics = evaluate(&test, &ck.params, Tolerances::SERVING)?;
    let baseline_auc = match baseline_train {
        Some(p) => summary_baseline_auc(&read_series(p, Some(&ck))?, &test)?,
        None => None,
    };
    let doc = EvalDocument { metrics, checkpoint_hash: hash, baseline_auc };
    create_dir(out_dir)?;
    let text = serde_json::to_string_pretty(&doc).unwrap() + "\n";
    write_file(&out_dir.join("metrics.json"), text.as_bytes())?;
    println!("{}", text.trim_end());
    let mut m = Manifest::new("eval", &serde_json::json!({ "tolerances": Tolerances::SERVING }), None).input(checkpoint)?.input(data)?;
    if let Some(p) = baseline_train {
        m = m.input(p)?;
    }
    m.write(out_dir, &["metrics.json"])
}

#[allow(clippy::too_many_arguments)]
pub fn predict(
    checkpoint: &Path,
    data: &Path,
    series_id: &str,
    config: Option<PathBuf>,
    overrides: &[String],
    fraction: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<(), CliError> {
    let opts: EnsembleOptions = load(config.as_deref(), overrides)?;
    opts.validate()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::invalid("fraction must lie in (0, 1]"));
    }
    let (ck, _) = load_checkpoint(checkpoint)?;
    let series = read_series(data, Some(&ck))?;
    let s = series
        .iter()
        .find(|s| s.id == series_id)
        .ok_or_else(|| CliError::invalid(format!("no series {:?} in {}", series_id, data.display())))?;
    let ens = sample_ensemble(s, &ck.params, fraction, &opts, seed)?;
    let doc = export_ensemble(&ens, s, &ck.norm_stats);
    create_dir(out_dir)?;
    write_file(&out_dir.join("ensemble.json"), (serde_json::to_string_pretty(&doc).unwrap() + "\n").as_bytes())?;
    let cfg = serde_json::json!({ "ensemble": opts, "series_id": series_id, "fraction": fraction });
    Manifest::new("predict", &cfg, Some(seed)).input(checkpoint)?.input(data)?.write(out_dir, &["ensemble.json"])
}

pub fn serve(
    checkpoint: &Path,
    config: Option<PathBuf>,
    overrides: &[String],
    host: &str,
    port: Option<u16>,
) -> Result<(), CliError> {
    let mut cfg: ServerConfig = load(config.as_deref(), overrides)?;
    if let Some(p) = port {
        cfg.port = p;
    }
    cfg.ensemble.validate()?;
    let (ck, hash) = load_checkpoint(checkpoint)?;
    let addr = format!("{}:{}", host, cfg.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(&addr).await.map_err(|e| CliError::runtime(format!("bind {}: {}", addr, e)))?;
        let local = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;
        tracing::info!("serving checkpoint {} on http://{}", hash, local);
        latode_service::serve(listener, AppState::new(ck, hash, cfg)).await.map_err(|e| CliError::runtime(e.to_string()))
    })
}
