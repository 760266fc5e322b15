use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lpk_cli::config::{Experiment, ExperimentConfig, Overrides};
use lpk_cli::run::{dry_run, execute, exit_code};

/// Loss-path-kernel experiments: train, accumulate Γ, compare against the bounds.
#[derive(Parser, Debug)]
#[command(name = "lpk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train once; report Γ, ε and the full bound against the measured gap.
    TrainBound(Common),
    /// Argument-stability divergence against the regime envelopes.
    Stability(Common),
    /// Closed-form ridge flow on random features.
    Krr(Common),
    /// NTK spectrum tracking and the wide-network bound.
    Ntk(Common),
    /// Two-stage spherical flow on single-index data.
    SingleIndex(Common),
    /// Γ versus generalization gap over label-noise fractions.
    NoiseSweep(Common),
    /// Pearson correlation of Γ(t) and the gap along one run.
    Correlation(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory (also `LPK_OUT`).
    #[arg(long, env = "LPK_OUT")]
    out: Option<PathBuf>,
    /// Validate the configuration and inputs without training.
    #[arg(long)]
    dry_run: bool,
}

impl Command {
    fn split(self) -> (Experiment, Common) {
        match self {
            Command::TrainBound(c) => (Experiment::TrainBound, c),
            Command::Stability(c) => (Experiment::Stability, c),
            Command::Krr(c) => (Experiment::Krr, c),
            Command::Ntk(c) => (Experiment::Ntk, c),
            Command::SingleIndex(c) => (Experiment::SingleIndex, c),
            Command::NoiseSweep(c) => (Experiment::NoiseSweep, c),
            Command::Correlation(c) => (Experiment::Correlation, c),
        }
    }
}

fn main() -> ExitCode {
    let (experiment, args) = Cli::parse().command.split();
    let overrides = Overrides {
        experiment: Some(experiment),
        seed: args.seed,
        out: args.out,
    };
    let result = ExperimentConfig::load(&args.config, &overrides).and_then(|cfg| {
        if args.dry_run {
            let d = dry_run(&cfg)?;
            Ok(serde_json::to_string_pretty(&d).expect("dry run serializes"))
        } else {
            let m = execute(&cfg)?;
            Ok(serde_json::to_string_pretty(&m).expect("manifest serializes"))
        }
    });
    match result {
        Ok(s) => {
            println!("{s}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
