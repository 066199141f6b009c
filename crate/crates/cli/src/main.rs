use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qdiff_cli::commands::{cmd_compare, cmd_run, cmd_validate};
use qdiff_cli::config::{Overrides, WorkersConfig};
use qdiff_cli::CliError;

/// Monte Carlo simulator for quantum state diffusion: stochastic trajectory
/// engines, Born-rule measurement experiments, and a linear-vs-nonlinear
/// equivalence harness.
#[derive(Parser)]
#[command(name = "qdiff", version, about)]
struct Cli {
    /// Override the config seed (decimal 64-bit unsigned integer).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads: "auto" or a positive integer.
    #[arg(long, global = true)]
    workers: Option<String>,

    /// Force bit-exact mode (deterministic artifacts at any worker count).
    #[arg(long, global = true)]
    bit_exact: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a config, printing it with defaults filled in.
    Validate { config: PathBuf },
    /// Run the configured experiment and write summary/series/manifest.
    Run { config: PathBuf },
    /// Run several engines over the shared spec and write the equivalence
    /// report.
    Compare { config: PathBuf },
}

fn parse_workers(raw: &str) -> Result<WorkersConfig, CliError> {
    if raw == "auto" {
        return Ok(WorkersConfig::Auto);
    }
    match raw.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(WorkersConfig::Fixed(n)),
        _ => Err(CliError::Semantic {
            field: "--workers".into(),
            message: format!("expected \"auto\" or a positive integer, got \"{raw}\""),
        }),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workers = cli.workers.as_deref().map(parse_workers).transpose()?;
    let overrides = Overrides {
        seed: cli.seed,
        workers,
        bit_exact: if cli.bit_exact { Some(true) } else { None },
    };
    match cli.command {
        Command::Validate { config } => {
            let normalized = cmd_validate(&config, &overrides)?;
            println!("{normalized}");
            Ok(())
        }
        Command::Run { config } => {
            let outcome = cmd_run(&config, &overrides)?;
            for artifact in &outcome.artifacts {
                println!("{}", artifact.display());
            }
            if outcome.had_failures {
                Err(CliError::Trajectory(
                    "one or more trajectories failed; see summary.json".into(),
                ))
            } else {
                Ok(())
            }
        }
        Command::Compare { config } => {
            let outcome = cmd_compare(&config, &overrides)?;
            for artifact in &outcome.artifacts {
                println!("{}", artifact.display());
            }
            if outcome.had_failures {
                Err(CliError::Trajectory(
                    "one or more trajectories failed; see compare.json".into(),
                ))
            } else {
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qdiff: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
