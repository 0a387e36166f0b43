use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::json;

use wts_core::checks::{run_all, CheckOptions};
use wts_core::config::KvConfig;
use wts_core::embedding::{generate_synthetic, EmbeddingDataset, SyntheticSpec};
use wts_core::eval::{evaluate, group_split, groups_for, RunMetrics};
use wts_core::experiment::{
    corrupt_dataset, derive_seed, run_cell, summarize, sweep_cells, CellResult, Scenario, CSV_HEADER, SUMMARY_HEADER,
};
use wts_core::noise::{indices_by_class, ClassHistogram, NoiseKind};
use wts_core::probe::Checkpoint;
use wts_core::teacher::{text_predicted_labels, TeacherHead};
use wts_core::trainer::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "wts", version, about = "Weak text supervision for noisy long-tailed linear probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a clean synthetic embedding dataset.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 0.3)]
        spread: f64,
        #[arg(long, default_value_t = 0.5)]
        teacher_quality: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Long-tail subsample a clean dataset and corrupt its observed labels.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise: NoiseKind,
        #[arg(long)]
        gamma: f64,
        #[arg(long = "if")]
        imbalance_factor: f64,
        /// Size of the largest class; defaults to the smallest class pool.
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "cyclic")]
        mapping: String,
        /// Also write the label assignment as text.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Split off this many clean samples per class before subsampling.
        #[arg(long, requires = "holdout_out")]
        holdout: Option<usize>,
        /// Where the clean, balanced holdout is written.
        #[arg(long, requires = "holdout")]
        holdout_out: Option<PathBuf>,
    },
    /// Train a probe from a key = value config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset with true labels.
    Eval {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dataset whose true-label histogram defines head/medium/tail.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot accuracy of the frozen text prototypes.
    TeacherEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient and invariance checks.
    Check {
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Train every (seed, tau, method) cell of a scenario and write CSVs.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-(method, tau) mean/stddev; defaults to `<out>.summary.csv`.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WTS_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", format!("{err:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { classes, dim, samples_per_class, spread, teacher_quality, seed, out } => {
            let spec = SyntheticSpec { classes, dim, samples_per_class, cluster_spread: spread, teacher_quality, seed };
            let ds = generate_synthetic(&spec)?;
            ds.save(&out).with_context(|| format!("writing {}", out.display()))?;
            info!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Corrupt {
            data,
            out,
            noise,
            gamma,
            imbalance_factor,
            n_max,
            seed,
            mapping,
            labels,
            holdout,
            holdout_out,
        } => {
            if mapping != "cyclic" {
                bail!("unsupported mapping {mapping:?} (only cyclic)");
            }
            let mut clean = load(&data)?;
            if let (Some(per_class), Some(path)) = (holdout, holdout_out) {
                let (rest, test) = clean.split_holdout(per_class, derive_seed(seed, 3))?;
                test.save(&path).with_context(|| format!("writing {}", path.display()))?;
                clean = rest;
            }
            let n_max = match n_max {
                Some(n) => n,
                None => indices_by_class(clean.require_true_labels()?, clean.num_classes())?
                    .iter()
                    .map(Vec::len)
                    .min()
                    .unwrap_or(0),
            };
            let (corrupted, histogram, _, assignment) = corrupt_dataset(
                &clean,
                imbalance_factor,
                n_max,
                noise,
                gamma,
                derive_seed(seed, 1),
                derive_seed(seed, 2),
            )?;
            corrupted.save(&out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = labels {
                let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
                assignment.write_to(BufWriter::new(file))?;
            }
            println!(
                "{}",
                json!({
                    "samples": corrupted.len(),
                    "counts": histogram.counts(),
                    "flip_rate": assignment.flip_rate(),
                })
            );
        }
        Command::Train { config } => cmd_train(&config)?,
        Command::Eval { probe, data, train, out } => {
            let ckpt = Checkpoint::load(&probe).with_context(|| format!("reading {}", probe.display()))?;
            let ds = load(&data)?;
            let groups = match train {
                Some(path) => groups_for(&load(&path)?),
                None => groups_for(&ds),
            };
            let metrics = evaluate(&ckpt.probe, &ds, &groups)?;
            emit(&serde_json::to_value(&metrics)?, out.as_deref())?;
        }
        Command::TeacherEval { data, out } => {
            let ds = load(&data)?;
            let head = TeacherHead::new(ds.text_embeddings().clone())?;
            // Exported files usually carry only directory labels.
            let (labels, source) = match ds.true_labels() {
                Some(t) => (t, "true"),
                None => (ds.observed_labels(), "observed"),
            };
            let groups = group_split(ClassHistogram::from_labels(labels, ds.num_classes())?.counts());
            let predicted = text_predicted_labels(&head.similarities(ds.image_embeddings())?);
            let metrics = RunMetrics::from_predictions(&predicted, labels, &groups)?;
            let mut report = serde_json::to_value(&metrics)?;
            report["labels"] = json!(source);
            emit(&report, out.as_deref())?;
        }
        Command::Check { corrupt_gradient } => {
            let results = run_all(CheckOptions { corrupt_gradient })?;
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passed;
            }
            if !ok {
                eprintln!("error: {} of {} checks failed", results.iter().filter(|r| !r.passed).count(), results.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep { config, out, summary, jobs } => return cmd_sweep(&config, &out, summary, jobs),
    }
    Ok(ExitCode::SUCCESS)
}

fn load(path: &Path) -> Result<EmbeddingDataset> {
    EmbeddingDataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())),
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            r => Ok(r?),
        },
    }
}

const TRAIN_PATH_KEYS: &[&str] = &["data", "test", "checkpoint", "metrics"];

/// Relative paths in a config are taken relative to the config file.
fn config_path(cfg: &KvConfig, config: &Path, key: &str) -> Option<PathBuf> {
    let raw = cfg.raw(key)?;
    let p = PathBuf::from(raw);
    Some(if p.is_absolute() { p } else { config.parent().unwrap_or(Path::new(".")).join(p) })
}

fn cmd_train(config: &Path) -> Result<()> {
    let cfg = KvConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    let known: Vec<&str> = TrainConfig::KEYS.iter().chain(TRAIN_PATH_KEYS).copied().collect();
    cfg.check_keys(&known)?;
    let train_cfg = TrainConfig::from_kv(&cfg)?;
    let require = |key: &str| config_path(&cfg, config, key).ok_or_else(|| wts_core::Error::MissingField(key.into()));
    let data = load(&require("data")?)?;
    let test = config_path(&cfg, config, "test").map(|p| load(&p)).transpose()?;
    let checkpoint = require("checkpoint")?;
    let metrics_path = require("metrics")?;

    let outcome = train(&data, &train_cfg, test.as_ref())?;
    Checkpoint { probe: outcome.probe.clone(), log_temperature: outcome.log_temperature }
        .save(&checkpoint)
        .with_context(|| format!("writing {}", checkpoint.display()))?;
    let report = json!({
        "config": train_cfg,
        "epochs": outcome.epochs,
        "final_temperature": outcome.log_temperature.exp(),
        "mean_overlap_ratio": outcome.mean_overlap_ratio(),
        "fire_rate": outcome.fire_rate(),
        "test": outcome.final_test(),
        "batches": outcome.batches,
    });
    emit(&report, Some(&metrics_path))?;
    if let Some(m) = outcome.final_test() {
        info!("final test accuracy {:.4}", m.overall);
    }
    Ok(())
}

fn cmd_sweep(config: &Path, out: &Path, summary: Option<PathBuf>, jobs: Option<usize>) -> Result<ExitCode> {
    let cfg = KvConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    let known: Vec<&str> = Scenario::KEYS.iter().chain(TrainConfig::KEYS).chain(&["seeds", "taus"]).copied().collect();
    cfg.check_keys(&known)?;
    let scenario = Scenario::from_kv(&cfg)?;
    let seeds: Vec<u64> = cfg.list("seeds")?.ok_or_else(|| wts_core::Error::MissingField("seeds".into()))?;
    let taus: Vec<f64> = cfg.list("taus")?.unwrap_or_else(|| vec![scenario.train.tau]);
    if seeds.is_empty() || taus.is_empty() {
        bail!("sweep needs at least one seed and one tau");
    }
    let cells = sweep_cells(&seeds, &taus);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?;
    let results: Vec<wts_core::Result<CellResult>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(seed, tau, method)| {
                let r = run_cell(&scenario, method, tau, seed);
                if let Ok(c) = &r {
                    info!("{method} tau={tau} seed={seed}: {:.4}", c.overall);
                }
                r
            })
            .collect()
    });

    let file = File::create(out).with_context(|| format!("writing {}", out.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CSV_HEADER}")?;
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (&(seed, tau, method), r) in cells.iter().zip(results) {
        match r {
            Ok(cell) => {
                writeln!(w, "{}", cell.csv_row())?;
                done.push(cell);
            }
            Err(e) => failures.push((seed, tau, method, e)),
        }
    }
    for (seed, tau, method, e) in &failures {
        warn!("{method} tau={tau} seed={seed} failed: {e}");
        writeln!(w, "FAILED:{method},{tau},{},{},{seed},,,,,,", scenario.gamma, scenario.imbalance_factor)?;
    }
    w.flush()?;

    let summary = summary.unwrap_or_else(|| out.with_extension("summary.csv"));
    let mut s = BufWriter::new(File::create(&summary).with_context(|| format!("writing {}", summary.display()))?);
    writeln!(s, "{SUMMARY_HEADER}")?;
    for row in summarize(&done) {
        writeln!(s, "{}", row.csv_row())?;
        println!("{}", row.csv_row());
    }
    s.flush()?;

    if let Some((seed, tau, method, e)) = failures.first() {
        eprintln!(
            "error: {} of {} cells failed; first: {method} tau={tau} seed={seed}: {e}",
            failures.len(),
            cells.len()
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
