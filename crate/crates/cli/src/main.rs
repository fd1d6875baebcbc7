//! `trnet`: cost analysis, merge planning, decomposition, oracle suites and
//! training for tensor-ring compressed networks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Exit status for a failed check, diverged training run or runtime error.
const EXIT_FAILURE: u8 = 1;
/// Exit status for bad arguments or an input that fails schema validation.
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "trnet", version, about = "Tensor-ring network compression toolkit")]
struct Cli {
    /// Seed for every random choice; overrides any seed in a config file.
    #[arg(long, global = true, env = "TRNET_SEED")]
    seed: Option<u64>,

    /// Write 0 in place of wall-clock columns so outputs are byte-reproducible.
    #[arg(long, global = true)]
    no_timestamps: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer and total parameter/MAC counts for an architecture file.
    Analyze {
        arch: PathBuf,
        /// Ring rank (defaults to the file's `defaults.rank`).
        #[arg(long)]
        rank: Option<usize>,
        /// Batch size (defaults to the file's `defaults.batch`).
        #[arg(long)]
        batch: Option<usize>,
        /// Print r^3/r^2 coefficients instead of evaluated counts.
        #[arg(long)]
        symbolic: bool,
        #[arg(long, conflicts_with = "json")]
        csv: bool,
        #[arg(long)]
        json: bool,
    },
    /// Cost merge orders for a chain of cores; prints a JSON report.
    Plan {
        /// Mode sizes, e.g. 4,7,4,7.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        /// Enumerate every merge order (2 to 12 cores).
        #[arg(long)]
        all: bool,
        /// Check every merge order against the flop and memory bounds; exit 1 on a violation.
        #[arg(long)]
        check_theorem1: bool,
    },
    /// Fit a tensor ring to a `.trt` tensor by alternating least squares.
    Decompose {
        input: PathBuf,
        #[arg(long)]
        rank: usize,
        /// Reshape the input to these modes first.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 100)]
        sweeps: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        /// Stop early once the relative fit error reaches this value.
        #[arg(long, default_value_t = 0.0)]
        target_fit: f64,
        /// Exit 1 if the final fit error exceeds this value.
        #[arg(long)]
        max_fit: Option<f64>,
        /// Write the fitted cores as a `.trm` checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run fixed-seed oracle suites.
    Verify {
        /// construct, theorem1, roundtrip, fc-equiv, conv-equiv, grad, init-variance or all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Directory for `.trt` witness dumps of failing checks.
        #[arg(long, default_value = ".")]
        witness_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train a network described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the MNIST IDX files.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Output directory for log.csv, model.trm, model.json and config.echo.json.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure with the exit status it maps to.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<trnet::Error> for Failure {
    fn from(e: trnet::Error) -> Self {
        match e {
            trnet::Error::Schema {
                ref pointer,
                ref message,
            } => {
                let at = if pointer.is_empty() { "/" } else { pointer };
                Failure::usage(format!("schema error at {at}: {message}"))
            }
            other => Failure::failed(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze {
            arch,
            rank,
            batch,
            symbolic,
            csv,
            json,
        } => commands::analyze(&arch, rank, batch, symbolic, csv, json),
        Command::Plan {
            dims,
            rank,
            all,
            check_theorem1,
        } => commands::plan(&dims, rank, all, check_theorem1),
        Command::Decompose {
            input,
            rank,
            modes,
            sweeps,
            tol,
            restarts,
            target_fit,
            max_fit,
            out,
        } => commands::decompose(commands::DecomposeArgs {
            input,
            rank,
            modes,
            sweeps,
            tol,
            restarts,
            target_fit,
            max_fit,
            out,
            seed: cli.seed.unwrap_or(0),
        }),
        Command::Verify {
            suite,
            witness_dir,
            json,
        } => commands::verify(&suite, &witness_dir, json, cli.seed.unwrap_or(0)),
        Command::Train { config, data_dir, out } => {
            commands::train(&config, data_dir.as_deref(), &out, cli.seed, !cli.no_timestamps)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("trnet: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
