use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gupg_core::config::{Command, ExperimentConfig};
use gupg_core::experiments::{run_command, sweep};

#[derive(Parser)]
#[command(name = "gupg", version, about = "Policy gradient for general utilities on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Saddle-point gradient estimate against the chain-rule oracle.
    EstimateGradient(Common),
    /// Policy-gradient ascent with per-iterate metrics.
    Train(Common),
    /// Estimator MSE against batch size.
    MseStudy(Common),
    /// Ascent gap series and convergence-rate fits.
    RateStudy(Common),
    /// Grid of runs over the config's sweep axes.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> gupg_core::Result<()> {
    let (command, common) = match cli.command {
        Cmd::EstimateGradient(c) => (Some(Command::EstimateGradient), c),
        Cmd::Train(c) => (Some(Command::Train), c),
        Cmd::MseStudy(c) => (Some(Command::MseStudy), c),
        Cmd::RateStudy(c) => (Some(Command::RateStudy), c),
        Cmd::Sweep(c) => (None, c),
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = common.out.unwrap_or_else(|| cfg.output.clone());
    let summary = match command {
        Some(c) => run_command(c, &cfg, &out)?,
        None => serde_json::Value::Array(sweep(&cfg, &out)?),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
