use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Minimum empirical divergence estimation.
#[derive(Debug, Parser)]
#[command(name = "meden", version = meden::VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate theta from a CSV sample.
    Estimate {
        /// CSV file, one observation per row, optional header.
        #[arg(long)]
        data: PathBuf,
        /// Built-in moment model.
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "KLm")]
        divergence: String,
        /// Apply the equivariant correction (additive models only).
        #[arg(long)]
        umre: bool,
        /// Output JSON file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo study described by a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving `mse.csv` and `report.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print domains and conjugate values of the named divergences.
    Conjugates {
        #[arg(long, default_value_t = 9)]
        points: usize,
    },
}

/// Exit 1: bad input from the caller. Exit 2: the numerics gave up.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    eprintln!("meden {}", meden::VERSION);
    let result = match cli.command {
        Command::Estimate {
            data,
            model,
            divergence,
            umre,
            out,
        } => commands::cmd_estimate(&data, &model, &divergence, umre, out.as_deref()),
        Command::Simulate { config, out } => commands::cmd_simulate(&config, &out),
        Command::Conjugates { points } => commands::cmd_conjugates(points),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Numerical(m) => eprintln!("numerical failure: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
