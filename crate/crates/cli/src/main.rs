//! `impest`: reduce feeders, simulate smart-meter data, estimate line
//! impedances and validate the result.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "impest", version, about = "Joint state and line-impedance estimation for distribution feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set solver.max_iter=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Repeat for more detail; writes the solver iteration log.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Remove pass-through buses and write `feeder_reduced.json`.
    Reduce {
        /// Feeder JSON; defaults to `feeder` from the config.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate meter data on a truth feeder and split it.
    Simulate(Common),
    /// Estimate impedances from training data.
    Estimate(Common),
    /// Compare the estimate against a reference and write the report.
    Validate(Common),
    /// Regenerate tables and figures from `report.json`.
    Report {
        /// Directory holding `report.json`.
        dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub const USAGE: u8 = 64;
    pub const DATA: u8 = 2;
    pub const SOLVER: u8 = 3;

    pub fn usage(e: impl std::fmt::Display) -> Self {
        Self { code: Self::USAGE, error: anyhow::anyhow!("{e}") }
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        Self { code: Self::DATA, error: anyhow::anyhow!("{e}") }
    }

    pub fn solver(e: impl std::fmt::Display) -> Self {
        Self { code: Self::SOLVER, error: anyhow::anyhow!("{e}") }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::data(e)
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(Failure::USAGE),
            };
        }
    };
    let result = match cli.command {
        Command::Reduce { input, common } => {
            init_logging(common.verbose);
            commands::reduce(input, &common)
        }
        Command::Simulate(c) => {
            init_logging(c.verbose);
            commands::simulate(&c)
        }
        Command::Estimate(c) => {
            init_logging(c.verbose);
            commands::estimate(&c)
        }
        Command::Validate(c) => {
            init_logging(c.verbose);
            commands::validate(&c)
        }
        Command::Report { dir, common } => {
            init_logging(common.verbose);
            commands::report(dir.as_deref().unwrap_or(&common.out))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
