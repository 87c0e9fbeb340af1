//! `cmus`: generate synthetic data, train with cross-validation, evaluate
//! checkpoints, run ablation suites and re-render reports.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmus_core::datagen::{read_manifest, write_manifest};
use cmus_core::harness::config::TaskSource;
use cmus_core::harness::cv::{evaluate_dataset, load_dataset, train_full};
use cmus_core::harness::{
    emit_report, read_report, render_table, run_ablation_suite, run_cross_validation,
    ExperimentConfig, Report, Suite,
};
use cmus_core::model::CmusModel;
use cmus_core::{CmusError, Result};

#[derive(Parser)]
#[command(name = "cmus", version, about = "Cross-modal multi-instance fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Experiment config file (flat key=value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the data seed and the training base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides output.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for folds and ablation rows.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Extra `key=value` assignments applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic task as a manifest directory.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validate, write the report, and save a model trained on all records.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a manifest directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the configured task.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run an ablation suite.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: String,
    },
    /// Re-render report files from a summary.json.
    Report {
        #[command(flatten)]
        common: Common,
        /// Path to summary.json.
        #[arg(long)]
        summary: PathBuf,
    },
}

const CHECKPOINT_FILE: &str = "checkpoint.json";
const CONFIG_FILE: &str = "config.txt";

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CmusError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        cfg.task.set_seed(s);
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if common.jobs == 0 {
        return Err(CmusError::Config("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish(report: &Report, dir: &Path) -> Result<()> {
    emit_report(report, dir)?;
    print!("{}", render_table(report));
    println!("wrote {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = resolve(&common)?;
            if let TaskSource::Manifest { .. } = cfg.task {
                return Err(CmusError::Config("generate needs a synthetic task".into()));
            }
            let ds = load_dataset(&cfg.task)?;
            write_manifest(&ds, &cfg.output_dir)?;
            println!("wrote {} patients to {}", ds.records.len(), cfg.output_dir.display());
            Ok(())
        }
        Command::Train { common } => {
            let cfg = resolve(&common)?;
            let summary = run_cross_validation(&cfg, common.jobs)?;
            let ds = load_dataset(&cfg.task)?;
            let model = train_full(&cfg, &ds)?;
            let dir = &cfg.output_dir;
            finish(&Report::Run(summary), dir)?;
            model.save(&dir.join(CHECKPOINT_FILE))?;
            cfg.save(&dir.join(CONFIG_FILE))
        }
        Command::Evaluate {
            common,
            checkpoint,
            manifest,
        } => {
            let cfg = resolve(&common)?;
            let model = CmusModel::load(&checkpoint)?;
            let ds = match manifest {
                Some(dir) => read_manifest(&dir)?,
                None => load_dataset(&cfg.task)?,
            };
            let summary = evaluate_dataset(&model, &ds, "checkpoint")?;
            finish(&Report::Run(summary), &cfg.output_dir)
        }
        Command::Ablate { common, suite } => {
            let cfg = resolve(&common)?;
            let suite: Suite = suite.parse()?;
            let table = run_ablation_suite(suite, &cfg, common.jobs)?;
            finish(&Report::Ablation(table), &cfg.output_dir)
        }
        Command::Report { common, summary } => {
            let report = read_report(&summary)?;
            let out = match common.out {
                Some(o) => o,
                None => summary
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            finish(&report, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
