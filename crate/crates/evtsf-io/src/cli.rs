//! The `evtsf` command set.
//!
//! Five subcommands cover the full workflow: `gen` a synthetic panel,
//! `train` a model on it, `eval` a checkpoint against a panel's test range
//! (optionally comparing to an oracle or pre-expansion reference run),
//! `ablate` the loss-variant ladder or an alpha sweep, and `export-graph`
//! the learned adjacency. Output locations default to `$EVTSF_OUT_DIR`,
//! then the current directory.

use crate::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use crate::dataset::{load_dataset, save_dataset};
use crate::report::{
    read_single_report, write_curves, write_reports, CURVES_FILE, METRICS_CSV_FILE,
    METRICS_JSON_FILE,
};
use crate::runconfig::RunConfig;
use crate::{fmt_f64, write_output, IoError, Result};
use clap::{Parser, Subcommand};
use evtsf_core::data::describe;
use evtsf_core::graph::snapshot_adjacency;
use evtsf_core::rng::StreamRng;
use evtsf_core::train::{
    attach_oracle, attach_reference, report_for, run_ablation, train, MetricsReport,
};
use std::path::{Path, PathBuf};

pub const GRAPH_FILE: &str = "graph.csv";

/// Environment variable supplying the default output directory.
pub const OUT_DIR_ENV: &str = "EVTSF_OUT_DIR";

/// Forecasting toolkit for sensor networks that grow mid-deployment.
#[derive(Debug, Parser)]
#[command(name = "evtsf", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic expanding-variate panel
    Gen {
        /// Run configuration (JSON); defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: $EVTSF_OUT_DIR, then ".")
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the fully observed twin panel here, for oracle runs
        #[arg(long)]
        oracle_out: Option<PathBuf>,
    },
    /// Train a model on a generated panel
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding manifest.json and values.csv
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's loss variant
        #[arg(long)]
        variant: Option<String>,
        /// Override the config's pooling strategy
        #[arg(long)]
        strategy: Option<String>,
        /// Override the config's training seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a panel's test range
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// metrics.json of an oracle run; fills the oracle-gap columns
        #[arg(long)]
        oracle_report: Option<PathBuf>,
        /// metrics.json of a pre-expansion run; fills the forgetting column
        #[arg(long)]
        reference_report: Option<PathBuf>,
    },
    /// Run the loss-variant ladder, or an alpha sweep
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of seeds (0, 1, …, k-1) per cell
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Sweep the expanding-row temperature multiplier over a comma
        /// list instead of running the variant ladder
        #[arg(
            long,
            num_args = 0..=1,
            default_missing_value = "0.05,0.1,0.3,0.5,0.7,1.0"
        )]
        sweep_alpha: Option<String>,
    },
    /// Export a checkpoint's learned adjacency over all variables
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Time slot whose calendar context the adjacency is built for
        #[arg(long, default_value_t = 0)]
        slot: usize,
    },
}

/// Resolves an output directory (flag, then environment, then ".") and
/// makes sure it exists.
fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| IoError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Parses one enum token the way the config file would spell it.
fn parse_token<T: serde::de::DeserializeOwned>(what: &str, token: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(token.to_string()))
        .map_err(|e| IoError::Input(format!("invalid {what} {token:?}: {e}")))
}

fn parse_alpha_list(list: &str) -> Result<Vec<f64>> {
    let mut alphas = Vec::new();
    for piece in list.split(',') {
        let trimmed = piece.trim();
        let a: f64 = trimmed
            .parse()
            .map_err(|e| IoError::Input(format!("invalid alpha {trimmed:?}: {e}")))?;
        if !(a > 0.0 && a <= 1.0) {
            return Err(IoError::Input(format!(
                "alpha values must lie in (0, 1], got {trimmed}"
            )));
        }
        alphas.push(a);
    }
    Ok(alphas)
}

fn summarize(report: &MetricsReport) -> String {
    let overall = report
        .test
        .overall
        .expect("validated reports have overall scores");
    let mut line = format!(
        "test MAE {} RMSE {} (best epoch {}, validation MAE {})",
        fmt_f64(overall.mae),
        fmt_f64(overall.rmse),
        report.best_epoch,
        fmt_f64(report.best_val_mae),
    );
    if let Some(d) = report.delta_mae {
        line.push_str(&format!(", oracle gap {:.2}%", d * 100.0));
    }
    if let Some(a) = report.afmae {
        line.push_str(&format!(", forgetting {}", fmt_f64(a)));
    }
    line
}

/// Executes one parsed command, printing progress to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            out,
            oracle_out,
        } => {
            let rc = load_config(config.as_deref())?;
            let gen = rc.gen_config();
            gen.validate()?;
            let ds =
                evtsf_core::data::generate_synthetic(&gen, &StreamRng::from_seed(rc.data_seed))?;
            let dir = out_dir(out)?;
            save_dataset(&ds, &dir)?;
            println!("{}", describe(&ds));
            println!("wrote manifest.json and values.csv to {}", dir.display());
            if let Some(oracle_dir) = oracle_out {
                let dir = out_dir(Some(oracle_dir))?;
                save_dataset(&ds.to_oracle(), &dir)?;
                println!("wrote fully observed twin to {}", dir.display());
            }
            Ok(())
        }

        Command::Train {
            config,
            data,
            out,
            variant,
            strategy,
            seed,
        } => {
            let rc = load_config(config.as_deref())?;
            let ds = load_dataset(&data)?;
            let mut cfg = rc.train_config(ds.n_vars(), ds.steps_per_day);
            if let Some(v) = variant {
                cfg.variant = parse_token("variant", &v)?;
            }
            if let Some(s) = strategy {
                cfg.strategy = parse_token("strategy", &s)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let outcome = train(&ds, &cfg)?;
            let dir = out_dir(out)?;
            Checkpoint::from_outcome(&cfg, &outcome).save(&dir.join(CHECKPOINT_FILE))?;
            write_curves(&dir.join(CURVES_FILE), &outcome.curves)?;
            println!(
                "trained {} epochs; best epoch {} with validation MAE {}",
                outcome.curves.len(),
                outcome.best_epoch,
                fmt_f64(outcome.best_val_mae),
            );
            println!(
                "wrote {CHECKPOINT_FILE} and {CURVES_FILE} to {}",
                dir.display()
            );
            Ok(())
        }

        Command::Eval {
            checkpoint,
            data,
            out,
            oracle_report,
            reference_report,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            if ckpt.config.model.graph.n_vars != ds.n_vars()
                || ckpt.config.model.graph.steps_per_day != ds.steps_per_day
            {
                return Err(IoError::Input(format!(
                    "checkpoint expects {} variables at {} slots/day, dataset has {} at {}",
                    ckpt.config.model.graph.n_vars,
                    ckpt.config.model.graph.steps_per_day,
                    ds.n_vars(),
                    ds.steps_per_day
                )));
            }
            let outcome = ckpt.to_outcome()?;
            let mut report = report_for(&ds, &ckpt.config, &outcome)?;
            if let Some(path) = oracle_report {
                attach_oracle(&mut report, &read_single_report(&path)?)?;
            }
            if let Some(path) = reference_report {
                attach_reference(&mut report, &read_single_report(&path)?)?;
            }
            let dir = out_dir(out)?;
            write_reports(&dir, std::slice::from_ref(&report))?;
            println!("{}", summarize(&report));
            println!(
                "wrote {METRICS_JSON_FILE} and {METRICS_CSV_FILE} to {}",
                dir.display()
            );
            Ok(())
        }

        Command::Ablate {
            config,
            data,
            out,
            seeds,
            sweep_alpha,
        } => {
            let rc = load_config(config.as_deref())?;
            let ds = load_dataset(&data)?;
            let base = rc.train_config(ds.n_vars(), ds.steps_per_day);
            let seed_list: Vec<u64> = (0..seeds).collect();
            let reports = match sweep_alpha {
                Some(list) => {
                    let alphas = parse_alpha_list(&list)?;
                    evtsf_core::train::alpha_sweep(&ds, &base, &alphas, &seed_list)?
                }
                None => run_ablation(&ds, &base, &seed_list)?,
            };
            let dir = out_dir(out)?;
            write_reports(&dir, &reports)?;
            for r in &reports {
                println!(
                    "variant {:?} alpha {} seed {}: {}",
                    r.config.variant,
                    fmt_f64(r.config.model.alpha),
                    r.config.seed,
                    summarize(r)
                );
            }
            println!("wrote {} reports to {}", reports.len(), dir.display());
            Ok(())
        }

        Command::ExportGraph {
            checkpoint,
            out,
            slot,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let outcome = ckpt.to_outcome()?;
            let model = &outcome.model;
            let adj = snapshot_adjacency(&model.cfg.graph, &model.params, &model.graph_ids, slot)?;
            let n = adj.dim(0);
            let mut csv = String::new();
            let header: Vec<String> = (0..n).map(|v| format!("v{v}")).collect();
            csv.push_str(&header.join(","));
            csv.push('\n');
            for r in 0..n {
                let row: Vec<String> = (0..n).map(|c| fmt_f64(adj.at2(r, c))).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            let dir = out_dir(out)?;
            write_output(&dir.join(GRAPH_FILE), &csv)?;
            println!(
                "wrote the {n} x {n} adjacency at slot {slot} to {}",
                dir.join(GRAPH_FILE).display()
            );
            Ok(())
        }
    }
}
