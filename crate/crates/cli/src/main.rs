use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gppp_cli::{cmd_diagnose, cmd_estimate, cmd_simulate, exit};

#[derive(Parser)]
#[command(name = "gppp", version = gppp_cli::VERSION, about = "Population-mean estimation from a non-probability sample and a reference survey")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the population mean with the configured methods.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a repeated-sampling simulation.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// JSON list of scenarios replacing the one in the config.
        #[arg(long)]
        scenario_grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propensity overlap, pseudo-weight outliers and kernel-smoother checks.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::VALIDATION as u8
            } else {
                exit::OK as u8
            });
        }
    };
    let result = match &cli.command {
        Command::Estimate { config, data, out } => cmd_estimate(config, data, out),
        Command::Simulate {
            config,
            workers,
            scenario_grid,
            out,
        } => cmd_simulate(config, *workers, scenario_grid.as_deref(), out),
        Command::Diagnose { config, data, out } => cmd_diagnose(config, data, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
