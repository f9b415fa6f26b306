use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Non-autoregressive diffusion forecasting for marked event sequences.
#[derive(Parser, Debug)]
#[command(name = "tppdiff", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (`key=value`); may repeat, wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic Hawkes dataset.
    Gen,
    /// Train a model; writes checkpoints and a CSV log.
    Train,
    /// Evaluate a checkpoint on the test split against naive baselines.
    Eval,
    /// Sample future windows for the test split.
    Sample,
    /// Train and evaluate every cell of a hyperparameter grid.
    Sweep {
        /// Grid axis `key=v1,v2,...`; may repeat. Defaults to the
        /// block-count × weight-decay grid.
        #[arg(long = "grid", value_name = "KEY=V1,V2")]
        grid: Vec<String>,
        /// Cells run concurrently as separate processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Cmd::Gen => commands::cmd_gen(&cfg),
        Cmd::Train => commands::cmd_train(&cfg),
        Cmd::Eval => commands::cmd_eval(&cfg).map(|_| ()),
        Cmd::Sample => commands::cmd_sample(&cfg),
        Cmd::Sweep { grid, jobs } => commands::cmd_sweep(&cfg, &grid, jobs),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
