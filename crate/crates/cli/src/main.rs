use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pierce_cli::config::ExperimentConfig;
use pierce_cli::stages::Run;
use pierce_eval::Subset;

#[derive(Parser)]
#[command(name = "pierce", about = "Ionospheric irregularity forecasting on dynamic pierce-point graphs")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(short, long, global = true, default_value = "configs/demo.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    All,
    New,
    Dropped,
    Retained,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::All => Subset::All,
            SubsetArg::New => Subset::New,
            SubsetArg::Dropped => Subset::Dropped,
            SubsetArg::Retained => Subset::Retained,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize raw observations, ground truth and space-weather indices.
    Generate,
    /// Derive 5-minute feature series from raw observations.
    Preprocess,
    /// Cross-validate events between stations and write label statistics.
    Label,
    /// Build graph snapshots, normalization statistics and splits.
    Build,
    /// Train one forecaster.
    Train {
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Score one forecaster on the test split.
    Evaluate {
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        subset: Option<SubsetArg>,
        /// Also run the simulated station-dropout sweep.
        #[arg(long)]
        dropout: bool,
    },
    /// Consolidate evaluations of every configured forecaster.
    Report,
    /// Run every stage from generation to report.
    Run,
}

fn stage_name(c: &Cmd) -> &'static str {
    match c {
        Cmd::Generate => "generate",
        Cmd::Preprocess => "preprocess",
        Cmd::Label => "label",
        Cmd::Build => "build",
        Cmd::Train { .. } => "train",
        Cmd::Evaluate { .. } => "evaluate",
        Cmd::Report => "report",
        Cmd::Run => "run",
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s)?;
    }
    let dir = cli.out.clone().or_else(|| cfg.out.clone()).context("no run directory: pass --out or set `out`")?;
    let mut run = Run::open(&dir, cfg)?;
    match cli.cmd {
        Cmd::Generate => run.generate()?,
        Cmd::Preprocess => run.preprocess()?,
        Cmd::Label => {
            run.label()?;
            print!("{}", std::fs::read_to_string(dir.join("labels/label_stats.txt"))?);
        }
        Cmd::Build => run.build()?,
        Cmd::Train { variant } => run.train(&variant)?,
        Cmd::Evaluate { variant, checkpoint, subset, dropout } => {
            print!("{}", run.evaluate(&variant, checkpoint.as_deref(), subset.map(Into::into), dropout)?);
            println!();
        }
        Cmd::Report => print!("{}", run.report()?),
        Cmd::Run => print!("{}", run.run_all()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = stage_name(&cli.cmd);
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pierce {stage}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
