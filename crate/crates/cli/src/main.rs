//! `gameunlearn`: train, attack, unlearn and evaluate from one experiment file.
//!
//! Exit codes: 0 success, 2 configuration, 3 data or missing files,
//! 4 numeric failure, 5 game divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gameunlearn::error::Error;

use commands::Ctx;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "gameunlearn", version, about = "Game-theoretic machine unlearning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (flat TOML). Defaults apply to keys it omits.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set rounds=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. Falls back to `output_dir`, then $GAMEUNLEARN_OUT, then ./out.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the original model on the full training split.
    Train(Common),
    /// Train the membership attacker against the original model.
    AttackTrain {
        #[command(flatten)]
        common: Common,
        /// Original checkpoint (default: <out>/original.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Play the unlearning game and write the unlearned model and its trace.
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Attack checkpoint (default: <out>/attack.ckpt).
        #[arg(long)]
        attack: Option<PathBuf>,
    },
    /// Score the checkpoints in the output directory into report.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Also retrain from scratch on the retain set for timing and baselines.
        #[arg(long)]
        with_retrain: bool,
    },
    /// Play one game per lambda in the config and write sweep.csv.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Row { .. } | Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::Divergence { .. } => 5,
        _ => 4,
    }
}

fn context(common: &Common) -> Result<Ctx, Error> {
    let cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
    let out = cfg.resolve_out_dir(common.out.as_deref());
    Ok(Ctx { cfg, out })
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train(c) => commands::train(&context(c)?),
        Command::AttackTrain { common, model } => commands::attack_train(&context(common)?, model.as_deref()),
        Command::Unlearn { common, model, attack } => {
            commands::unlearn(&context(common)?, model.as_deref(), attack.as_deref())
        }
        Command::Evaluate { common, with_retrain } => commands::evaluate(&context(common)?, *with_retrain),
        Command::SweepLambda { common, jobs } => commands::sweep_lambda(&context(common)?, *jobs),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
