//! `tivat` command implementations. Each command reads JSON/CSV inputs and
//! writes its results as files in a chosen directory.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;
use tivat_core::checkpoint::{load_checkpoint, save_checkpoint};
use tivat_core::config::{load_run_config, load_splits, RunConfig};
use tivat_core::data::{synth_leadlag, LeadLagSpec};
use tivat_core::export::{export_embeddings, export_guidelines};
use tivat_core::ja::GridPoint;
use tivat_core::train::{ablation_csv, evaluate_capped, fit, run_ablation, AblationAxis, EvalReport, History};
use tivat_core::{Error, Result, TiVaT};

#[derive(Debug, Parser)]
#[command(name = "tivat", version, about = "Joint-axis attention forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Embeddings,
    Guidelines,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history and validation report.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Train one model per variant of an ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
    },
    /// Write a synthetic lead-lag series as CSV.
    Synth {
        #[arg(long)]
        v: usize,
        #[arg(long)]
        len: usize,
        #[arg(long)]
        lag: usize,
        #[arg(long)]
        coupling: f64,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump first-block 2D embeddings or guideline masks for one window.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: ExportKind,
        /// Reference token as `patch,variate`.
        #[arg(long = "ref")]
        reference: String,
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config } => cmd_train(config).map(|_| ()),
        Command::Eval {
            config,
            checkpoint,
            horizon,
        } => {
            let report = cmd_eval(config, checkpoint, *horizon)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Ablate { config, axis } => cmd_ablate(config, axis).map(|_| ()),
        Command::Synth {
            v,
            len,
            lag,
            coupling,
            noise,
            seed,
            out,
        } => cmd_synth(
            &LeadLagSpec {
                variates: *v,
                len: *len,
                lag: *lag,
                coupling: *coupling,
                noise_std: *noise,
                seed: *seed,
            },
            out,
        ),
        Command::Export {
            checkpoint,
            what,
            reference,
            window,
            out,
        } => {
            let json = cmd_export(checkpoint, *what, reference, *window)?;
            let text = serde_json::to_string_pretty(&json)?;
            match out {
                Some(p) => write_file(p, &text),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn make_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Paths written by `train`.
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub history: History,
    pub report: EvalReport,
}

pub fn cmd_train(config: &Path) -> Result<TrainOutputs> {
    let cfg = load_run_config(config)?;
    let splits = load_splits(&cfg.data, cfg.model.lookback, cfg.model.horizon)?;
    let mut model = TiVaT::new(cfg.model.clone(), splits.train.num_variates())?;
    let history = fit(&mut model, &splits.train, &splits.val, &cfg.train)?;
    let report = evaluate_capped(&model, &splits.val, &cfg.dataset_label(), cfg.train.max_eval_windows)?;
    let dir = &cfg.output_dir;
    make_dir(dir)?;
    let checkpoint = dir.join("checkpoint.json");
    save_checkpoint(&model, Some(&cfg.data), &checkpoint)?;
    write_json(&dir.join("history.json"), &history)?;
    write_json(&dir.join("config.json"), &cfg.to_json())?;
    write_json(&dir.join("val_report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(TrainOutputs {
        checkpoint,
        history,
        report,
    })
}

fn check_compatible(cfg: &RunConfig, model: &TiVaT, horizon: Option<usize>) -> Result<()> {
    let trained = model.config.horizon;
    let want = horizon.unwrap_or(cfg.model.horizon);
    if want != trained {
        return Err(Error::Checkpoint(format!(
            "checkpoint projects to horizon {trained}, cannot evaluate horizon {want} (projector shape mismatch)"
        )));
    }
    if cfg.model.lookback != model.config.lookback {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects lookback {}, config has {}",
            model.config.lookback, cfg.model.lookback
        )));
    }
    Ok(())
}

pub fn cmd_eval(config: &Path, checkpoint: &Path, horizon: Option<usize>) -> Result<EvalReport> {
    let cfg = load_run_config(config)?;
    let (model, _) = load_checkpoint(checkpoint)?;
    check_compatible(&cfg, &model, horizon)?;
    let splits = load_splits(&cfg.data, model.config.lookback, model.config.horizon)?;
    if splits.test.num_variates() != model.num_variates {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} variates, data has {}",
            model.num_variates,
            splits.test.num_variates()
        )));
    }
    let report = evaluate_capped(&model, &splits.test, &cfg.dataset_label(), cfg.train.max_eval_windows)?;
    make_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("eval_report.json"), &report)?;
    Ok(report)
}

pub fn cmd_ablate(config: &Path, axis: &str) -> Result<PathBuf> {
    let axis_kind = AblationAxis::parse(axis)?;
    let cfg = load_run_config(config)?;
    let splits = load_splits(&cfg.data, cfg.model.lookback, cfg.model.horizon)?;
    let rows = run_ablation(
        &cfg.model,
        axis_kind,
        &splits.train,
        &splits.val,
        &splits.test,
        &cfg.dataset_label(),
        &cfg.train,
    )?;
    make_dir(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join(format!("ablation_{axis}.csv"));
    write_file(&csv_path, &ablation_csv(&rows)?)?;
    write_json(&cfg.output_dir.join(format!("ablation_{axis}.json")), &rows)?;
    print!("{}", ablation_csv(&rows)?);
    Ok(csv_path)
}

pub fn cmd_synth(spec: &LeadLagSpec, out: &Path) -> Result<()> {
    synth_leadlag(spec)?.write_csv(out)
}

pub fn parse_reference(text: &str) -> Result<GridPoint> {
    let bad = || Error::Config(format!("reference must look like `patch,variate`, got `{text}`"));
    let (p, v) = text.split_once(',').ok_or_else(bad)?;
    Ok(GridPoint::new(
        p.trim().parse().map_err(|_| bad())?,
        v.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn cmd_export(checkpoint: &Path, what: ExportKind, reference: &str, window: usize) -> Result<Value> {
    let reference = parse_reference(reference)?;
    let (model, data) = load_checkpoint(checkpoint)?;
    let data = data.ok_or_else(|| Error::Checkpoint("checkpoint carries no data source".into()))?;
    let splits = load_splits(&data, model.config.lookback, model.config.horizon)?;
    if window >= splits.test.len() {
        return Err(Error::Config(format!(
            "window {window} out of range; the test split has {} windows",
            splits.test.len()
        )));
    }
    let batch = splits.test.batch(&[window]);
    Ok(match what {
        ExportKind::Embeddings => serde_json::to_value(export_embeddings(&model, &batch.inputs, reference)?)?,
        ExportKind::Guidelines => serde_json::to_value(export_guidelines(&model, &batch.inputs, reference)?)?,
    })
}
