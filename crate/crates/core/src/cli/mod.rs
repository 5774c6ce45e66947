//! Command-line front end. `main.rs` only parses arguments and maps errors
//! to exit codes; every subcommand lives here so tests can call it directly.

mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datagen::{exact_match_eval, greedy_predictions, EvalSuite, SuiteScores};
use crate::error::{Error, Result};
use crate::experiment::{mean_retention, parse_sweep_csv, run_sweep, sweep_csv, ExperimentConfig, SweepRow};
use crate::model::{load_checkpoint, peek_header, save_checkpoint, MoeModel};
use crate::numerics::{Precision, Real};
use crate::trainer::{
    forgetting_report, metrics_csv, parse_metrics_csv, pretrain, run_finetune, Event, FinetuneOutcome, Policy,
    TrainConfig,
};

pub use plot::retention_plot;

#[derive(Debug, Parser)]
#[command(name = "moelab", version, about = "Desk-scale mixture-of-experts fine-tuning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base model on every domain plus the general task.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune the pretrained checkpoint under one policy.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: Policy,
        /// Fine-tune on the first N domains (default: all).
        #[arg(long)]
        domains: Option<usize>,
    },
    /// Exact-match scores of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the pretrained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        domains: Option<usize>,
    },
    /// Retention of the general suite as domains are added one at a time.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n_min: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Aggregate every run under a directory.
    Report { metrics_dir: PathBuf },
}

/// 0 success, 1 config error, 2 missing input, 3 numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) | Error::Shape(_) | Error::Json(_) => 1,
        Error::MissingInput(_) | Error::Load(_) | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Pretrain { config } => cmd_pretrain(&ExperimentConfig::load(&config)?),
        Command::Finetune { config, policy, domains } => cmd_finetune(&ExperimentConfig::load(&config)?, policy, domains),
        Command::Eval {
            config,
            checkpoint,
            domains,
        } => cmd_eval(&ExperimentConfig::load(&config)?, checkpoint.as_deref(), domains),
        Command::Sweep { config, n_min, n_max } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.sweep.n_min = n_min.unwrap_or(cfg.sweep.n_min);
            cfg.sweep.n_max = n_max.unwrap_or(cfg.sweep.n_max);
            cmd_sweep(&cfg)
        }
        Command::Report { metrics_dir } => cmd_report(&metrics_dir),
    }
}

fn prepare_dir(cfg: &ExperimentConfig, sub: &str) -> Result<PathBuf> {
    let dir = cfg.run_dir().join(sub);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config-echo.json"), cfg.echo()?)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn events_log(events: &[Event]) -> String {
    events.iter().fold(String::new(), |mut s, e| {
        let _ = writeln!(s, "{e}");
        s
    })
}

/// Writes `<run>/pretrain/{config-echo.json, metrics.csv, events.log, checkpoint.bin, summary.json}`.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    match cfg.model.precision {
        Precision::F32 => pretrain_typed::<f32>(cfg),
        Precision::F64 => pretrain_typed::<f64>(cfg),
    }
}

fn pretrain_typed<S: Real>(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = prepare_dir(cfg, "pretrain")?;
    let out = pretrain::<S>(cfg.model.clone(), &cfg.pretrain, &cfg.specs(0)?, &cfg.general(0))?;
    let hash = cfg.hash()?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&out.metrics))?;
    fs::write(dir.join("events.log"), "")?;
    save_checkpoint(&dir.join("checkpoint.bin"), &out.model, json!({ "config_hash": hash }))?;
    let last = out.metrics.last();
    write_json(
        &dir.join("summary.json"),
        &json!({
            "kind": "pretrain",
            "name": cfg.name,
            "config_hash": hash,
            "steps": cfg.pretrain.steps,
            "general_accuracy": last.map(|r| r.general_accuracy),
            "domain_accuracy": last.map(|r| &r.domain_accuracy),
        }),
    )?;
    info!("pretrained checkpoint written to {}", dir.display());
    Ok(dir)
}

fn load_base<S: Real>(cfg: &ExperimentConfig, path: &Path) -> Result<MoeModel<S>> {
    let (model, header) = load_checkpoint::<S>(path)?;
    let mut expected = cfg.model.clone();
    expected.precision = header.config.precision;
    if header.config != expected {
        return Err(Error::Load(format!("checkpoint {} was built for a different model config", path.display())));
    }
    Ok(model)
}

fn domain_count(cfg: &ExperimentConfig, domains: Option<usize>) -> Result<usize> {
    let total = cfg.specs(0)?.len();
    match domains {
        Some(n) if n == 0 || n > total => Err(Error::Argument(format!("--domains must be in 1..={total}, got {n}"))),
        Some(n) => Ok(n),
        None => Ok(total),
    }
}

/// Fine-tunes the pretrained checkpoint; writes `<run>/finetune-<policy>/`.
pub fn cmd_finetune(cfg: &ExperimentConfig, policy: Policy, domains: Option<usize>) -> Result<PathBuf> {
    let path = cfg.checkpoint_path();
    match peek_header(&path)?.precision {
        Precision::F32 => finetune_typed::<f32>(cfg, policy, domains, &path),
        Precision::F64 => finetune_typed::<f64>(cfg, policy, domains, &path),
    }
}

fn finetune_typed<S: Real>(cfg: &ExperimentConfig, policy: Policy, domains: Option<usize>, ckpt: &Path) -> Result<PathBuf> {
    let base = load_base::<S>(cfg, ckpt)?;
    let n = domain_count(cfg, domains)?;
    let dir = prepare_dir(cfg, &format!("finetune-{}", policy.flag()))?;
    let tc = TrainConfig {
        policy,
        ..cfg.train.clone()
    };
    let out = run_finetune(base, cfg.specs(0)?[..n].to_vec(), tc, &cfg.general(0))?;
    let hash = cfg.hash()?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&out.metrics))?;
    fs::write(dir.join("events.log"), events_log(&out.events))?;
    save_checkpoint(
        &dir.join("checkpoint.bin"),
        &out.model,
        json!({ "config_hash": hash, "policy": policy.flag() }),
    )?;
    let (before, held) = FinetuneOutcome::<S>::named_scores(&out.before);
    let (after, _) = FinetuneOutcome::<S>::named_scores(&out.after);
    // a base model that never solved the general suite has no defined retention
    let report = forgetting_report(&before, &after, &held)
        .inspect_err(|e| warn!("{policy}: {e}"))
        .ok();
    let duplications = out.events.iter().filter(|e| matches!(e, Event::Duplication { copy: Some(_), .. })).count();
    write_json(
        &dir.join("summary.json"),
        &json!({
            "kind": "finetune",
            "name": cfg.name,
            "config_hash": hash,
            "policy": policy.flag(),
            "domains": n,
            "steps": cfg.train.steps,
            "before": out.before,
            "after": out.after,
            "forgetting": report,
            "overlap": out.overlap,
            "duplications": duplications,
        }),
    )?;
    if let Some(r) = &report {
        info!("{policy}: general retention {:.3}", r.retention);
    }
    Ok(dir)
}

/// Scores a checkpoint and writes `<run>/eval/{summary.json, predictions.jsonl}`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, domains: Option<usize>) -> Result<PathBuf> {
    let path = checkpoint.map_or_else(|| cfg.checkpoint_path(), Path::to_path_buf);
    match peek_header(&path)?.precision {
        Precision::F32 => eval_typed::<f32>(cfg, &path, domains),
        Precision::F64 => eval_typed::<f64>(cfg, &path, domains),
    }
}

fn eval_typed<S: Real>(cfg: &ExperimentConfig, path: &Path, domains: Option<usize>) -> Result<PathBuf> {
    let (model, _) = load_checkpoint::<S>(path)?;
    let n = domain_count(cfg, domains)?;
    let suite = EvalSuite::build(&cfg.specs(0)?[..n], &cfg.general(0), cfg.train.eval_size);
    let scores = exact_match_eval(&model, &suite)?;
    let dir = prepare_dir(cfg, "eval")?;
    let mut dump = String::new();
    let named = suite
        .domains
        .iter()
        .map(|(d, ex)| (format!("domain.{d}"), ex))
        .chain(std::iter::once(("general".to_string(), &suite.general)));
    for (name, examples) in named {
        for (ex, pred) in examples.iter().zip(greedy_predictions(&model, examples)?) {
            let line = json!({ "suite": name, "prompt": ex.prompt, "answer": ex.answer, "prediction": pred });
            let _ = writeln!(dump, "{line}");
        }
    }
    fs::write(dir.join("predictions.jsonl"), dump)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "kind": "eval",
            "name": cfg.name,
            "config_hash": cfg.hash()?,
            "checkpoint": path,
            "scores": scores,
        }),
    )?;
    println!("{}", serde_json::to_string(&scores)?);
    Ok(dir)
}

/// Runs the domain-count sweep; writes `<run>/sweep/{retention.csv, summary.json, retention.png}`.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = prepare_dir(cfg, "sweep")?;
    let rows = run_sweep(cfg, &mut |r| {
        println!("N={} {:<12} seed={} retention={:.4}", r.n, r.policy, r.seed, r.retention)
    })?;
    fs::write(dir.join("retention.csv"), sweep_csv(&rows))?;
    fs::write(dir.join("events.log"), "")?;
    write_sweep_summary(&dir, &cfg.hash()?, &rows)?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub policy: Policy,
    pub n: usize,
    pub mean_retention: f64,
}

fn write_sweep_summary(dir: &Path, hash: &str, rows: &[SweepRow]) -> Result<Vec<CurvePoint>> {
    let curve: Vec<CurvePoint> = mean_retention(rows)
        .into_iter()
        .map(|(policy, n, mean_retention)| CurvePoint {
            policy,
            n,
            mean_retention,
        })
        .collect();
    write_json(
        &dir.join("summary.json"),
        &json!({ "kind": "sweep", "config_hash": hash, "curve": curve }),
    )?;
    retention_plot(&curve)?.save(dir.join("retention.png")).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub path: String,
    pub config_hash: Option<String>,
    pub policy: Option<String>,
    /// Recomputed from the first and last rows of `metrics.csv`.
    pub retention: f64,
    pub final_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub sweeps: Vec<SweepSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub path: String,
    pub config_hash: Option<String>,
    pub curve: Vec<CurvePoint>,
}

fn files_named(root: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_named(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

fn config_hash_of(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join("summary.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("config_hash")?.as_str().map(str::to_string)
}

/// Aggregates fine-tuning runs and sweeps below `dir` into
/// `dir/report.json` and one `retention.png` per sweep.
pub fn cmd_report(dir: &Path) -> Result<PathBuf> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(format!("{} is not a directory", dir.display())));
    }
    let (mut metrics, mut sweeps) = (Vec::new(), Vec::new());
    files_named(dir, "metrics.csv", &mut metrics)?;
    files_named(dir, "retention.csv", &mut sweeps)?;
    let mut report = Report {
        runs: Vec::new(),
        sweeps: Vec::new(),
    };
    for path in &metrics {
        let run_dir = path.parent().unwrap_or(dir);
        let records = parse_metrics_csv(&fs::read_to_string(path)?)?;
        // pretraining tables have no step-0 baseline
        let (Some(first), Some(last)) = (records.first(), records.last()) else { continue };
        if first.step != 0 || first.general_accuracy == 0.0 {
            continue;
        }
        let policy = run_dir
            .file_name()
            .and_then(|f| f.to_str())
            .and_then(|f| f.strip_prefix("finetune-"))
            .map(str::to_string);
        report.runs.push(RunSummary {
            path: rel(dir, run_dir),
            config_hash: config_hash_of(run_dir),
            policy,
            retention: last.general_accuracy / first.general_accuracy,
            final_overlap: last.overlap,
        });
    }
    for path in &sweeps {
        let sweep_dir = path.parent().unwrap_or(dir);
        let rows = parse_sweep_csv(&fs::read_to_string(path)?)?;
        let hash = config_hash_of(sweep_dir);
        let curve = write_sweep_summary(sweep_dir, hash.as_deref().unwrap_or(""), &rows)?;
        report.sweeps.push(SweepSummary {
            path: rel(dir, sweep_dir),
            config_hash: hash,
            curve,
        });
    }
    if report.runs.is_empty() && report.sweeps.is_empty() {
        return Err(Error::MissingInput(format!("no metrics.csv or retention.csv under {}", dir.display())));
    }
    write_json(&dir.join("report.json"), &report)?;
    Ok(dir.to_path_buf())
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

/// Scores that `summary.json` of a fine-tuning run records.
pub fn read_finetune_scores(dir: &Path) -> Result<(SuiteScores, SuiteScores)> {
    let text = fs::read_to_string(dir.join("summary.json"))
        .map_err(|e| Error::MissingInput(format!("{}: {e}", dir.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok((serde_json::from_value(v["before"].clone())?, serde_json::from_value(v["after"].clone())?))
}
