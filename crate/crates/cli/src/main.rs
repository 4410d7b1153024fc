use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slomo_cli::commands::{compare_command, gradcheck_command, rank_command, run_command, GradcheckArgs};
use slomo_cli::config::FileConfig;
use slomo_cli::CliError;

#[derive(Parser)]
#[command(name = "slomo", version, about = "Continual test-time adaptation experiments on synthetic corruption streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write steps.csv, summary.json and forgetting.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides SLOMO_OUT_DIR and the config file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds; each replaces every seed in the config.
        #[arg(long, value_delimiter = ',')]
        seed_overrides: Option<Vec<u64>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every loss and the network.
    Gradcheck {
        #[arg(long, default_value_t = slomo_core::gradsuite::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = slomo_core::gradsuite::DEFAULT_SEEDS)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Corrupts the analytic gradient of the named check (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run two configurations and print per-domain error deltas (b − a).
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank domains by frozen-source error.
    Rank {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a complete default configuration.
    Defaults,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed_overrides, jobs } => {
            run_command(&config, out.as_deref(), seed_overrides.as_deref(), jobs)?;
        }
        Command::Gradcheck { eps, seeds, jobs, inject_fault } => {
            gradcheck_command(&GradcheckArgs { eps, seeds, jobs, inject_fault })?;
        }
        Command::Compare { a, b, out } => print!("{}", compare_command(&a, &b, out.as_deref())?),
        Command::Rank { config, out } => print!("{}", rank_command(&config, out.as_deref())?),
        Command::Defaults => print!("{}", FileConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
