//! Command-line front end: dataset generation, training, evaluation, cost
//! analysis, throughput benchmarks, and ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration problems, 2 data or file
//! problems, 3 numeric failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pointstage::checkpoint::Checkpoint;
use pointstage::error::{Error, Result};
use pointstage::network::{Preset, Task};
use pointstage::{ablate, analysis, config, data, network, train};

#[derive(Parser)]
#[command(name = "pointstage", about = "Point-cloud learning toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Options shared by every subcommand: config assembly and the seed.
#[derive(Args)]
struct Common {
    /// TOML config file with [network], [train] and [data] sections
    #[arg(long)]
    config: Option<PathBuf>,

    /// Size preset: s, b, l, xl
    #[arg(long)]
    preset: Option<String>,

    /// Task: classify, segment, partseg
    #[arg(long)]
    task: Option<String>,

    /// Dotted config override, e.g. --set network.encoding.kind=pe_sin
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Seed for data generation, weight init and training order
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn load(&self) -> Result<config::AppConfig> {
        let preset = self.preset.as_deref().map(Preset::parse).transpose()?;
        let task = self.task.as_deref().map(Task::parse).transpose()?;
        config::load(self.config.as_deref(), preset, task, &self.set)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it to disk
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output path for the dataset container
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, print (or save) per-epoch metrics as CSV
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; generated from the config when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        /// Epoch count, overriding the config
        #[arg(long)]
        epochs: Option<usize>,
        /// Where to write the final checkpoint
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the metrics CSV (default: stdout)
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Resume from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; generated from the config when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to score: train, test, all
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print the analytic cost report (CSV by default)
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Input size the FLOP figures are stated at
        #[arg(long, default_value_t = 1024)]
        points: usize,
        /// Print the aligned text report instead of CSV
        #[arg(long)]
        text: bool,
    },
    /// Measure forward-pass throughput
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1024)]
        points: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Fail (exit 3) when stddev/median exceeds this bound
        #[arg(long)]
        jitter_bound: Option<f64>,
    },
    /// Sweep one config axis, training per cell, one CSV row per cell
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Axis to sweep, e.g. encoding.kind or aggregation.variant
        #[arg(long)]
        axis: String,
        /// Training runs per cell
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Epoch count, overriding the config
        #[arg(long)]
        epochs: Option<usize>,
        /// Where to write the CSV (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_or_generate(path: Option<&Path>, cfg: &config::AppConfig, seed: u64) -> Result<data::Dataset> {
    match path {
        Some(p) => data::Dataset::load(p),
        None => data::generate(&cfg.data, seed),
    }
}

fn write_or_print(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { common, out } => {
            let cfg = common.load()?;
            let dataset = data::generate(&cfg.data, common.seed)?;
            dataset.save(&out)?;
            eprintln!(
                "wrote {} samples of {} points to {}",
                dataset.samples.len(),
                dataset.points_per_cloud,
                out.display()
            );
            Ok(())
        }
        Cmd::Train { common, data, epochs, out, metrics, resume } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.train.validate()?;
            }
            let dataset = load_or_generate(data.as_deref(), &cfg, common.seed)?;
            let resume_ckpt = resume.as_deref().map(Checkpoint::load).transpose()?;
            let mut model = match &resume_ckpt {
                Some(ckpt) => network::build(ckpt.config.clone(), common.seed)?,
                None => network::build(cfg.network.clone(), common.seed)?,
            };
            let outcome = train::train(
                &mut model,
                &dataset,
                &cfg.train,
                common.seed,
                resume_ckpt.as_ref(),
                None,
            )?;
            write_or_print(metrics.as_deref(), &outcome.csv)?;
            if let Some(path) = out {
                outcome.checkpoint.save(&path)?;
                eprintln!("checkpoint written to {}", path.display());
            }
            if let Some(last) = outcome.rows.last() {
                eprintln!(
                    "epoch {}: train {:.4}, test {:.4}",
                    last.epoch, last.train_metric, last.test_metric
                );
            }
            Ok(())
        }
        Cmd::Eval { common, checkpoint, data, split } => {
            let cfg = common.load()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut model = network::build(ckpt.config.clone(), common.seed)?;
            ckpt.apply(&mut model)?;
            let dataset = load_or_generate(data.as_deref(), &cfg, common.seed)?;
            let (train_idx, test_idx) = dataset.train_test();
            let indices: Vec<usize> = match split.as_str() {
                "train" => train_idx,
                "test" => test_idx,
                "all" => (0..dataset.samples.len()).collect(),
                other => {
                    return Err(Error::Usage(format!(
                        "unknown split '{other}' (expected train, test, all)"
                    )))
                }
            };
            let (loss, cm) = train::evaluate(&mut model, &dataset, &indices, cfg.train.batch_size)?;
            let m = cm.metrics()?;
            println!(
                "split {}: loss {:.6} oa {:.4} macc {:.4} miou {:.4}",
                split, loss, m.oa, m.macc, m.miou
            );
            Ok(())
        }
        Cmd::Analyze { common, points, text } => {
            let cfg = common.load()?;
            let mut model = network::build(cfg.network.clone(), common.seed)?;
            let report = analysis::analyze(&mut model, points)?;
            if text {
                print!("{report}");
            } else {
                print!("{}", report.to_csv());
            }
            Ok(())
        }
        Cmd::Bench { common, points, batch, repeats, jitter_bound } => {
            let cfg = common.load()?;
            let mut model = network::build(cfg.network.clone(), common.seed)?;
            let report = analysis::benchmark(&mut model, batch, points, repeats)?;
            print!("{report}");
            if let Some(bound) = jitter_bound {
                if report.jitter > bound {
                    return Err(Error::Numeric(format!(
                        "throughput jitter {:.4} exceeds the declared bound {:.4}",
                        report.jitter, bound
                    )));
                }
            }
            Ok(())
        }
        Cmd::Ablate { common, axis, seeds, epochs, out } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.train.validate()?;
            }
            let (_, csv) = ablate::run(&cfg, &axis, seeds, common.seed)?;
            write_or_print(out.as_deref(), &csv)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version displays are successes; anything else is a
            // usage error under this tool's exit-code contract.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
