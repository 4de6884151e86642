//! `synmocap` command-line front end.
//!
//! ```text
//! synmocap synth --out runs/synth
//! synmocap track --config run.json --persons 1,3 --threads 8 --out runs/track
//! synmocap eval --pred runs/track/sequences --truth runs/synth/truth --out runs/eval
//! ```
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data format,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

#[derive(Debug, Parser)]
#[command(name = "synmocap", version, about = "Multi-camera markerless motion capture")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct Common {
    /// Run configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for per-person tracking (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Validate inputs and report what would be written, without writing.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Refine a camera rig from tracked sphere observations.
    Calibrate(commands::CalibrateArgs),
    /// Generate the synthetic scene: ground truth and confidence-map digest.
    Synth(commands::SynthArgs),
    /// Initialize persons from their first-frame detections.
    Init(commands::InitArgs),
    /// Initialize and track persons through a sequence.
    Track(commands::TrackArgs),
    /// Score predicted sequences against ground truth.
    Eval(commands::EvalArgs),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] synmocap::Error),
    /// The command ran but its result is not acceptable; outputs were written.
    #[error("{0}")]
    NotConverged(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(synmocap::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    fn exit_code(&self) -> u8 {
        use synmocap::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::NotConverged(_) | CliError::Internal(_) => 3,
            CliError::Core(e) => match e {
                E::Config { .. } | E::Io { .. } => 1,
                E::Format { .. }
                | E::Json { .. }
                | E::Lookup(_)
                | E::EmptyRange
                | E::InitFailure { .. }
                | E::AmbiguousIdentity { .. }
                | E::DegenerateLimb(_) => 2,
                E::BehindCamera { .. }
                | E::DegenerateGeometry(_)
                | E::NoConsensus { .. }
                | E::DegenerateProblem(_)
                | E::NumericalFailure(_)
                | E::IllPosed { .. }
                | E::NoHistory => 3,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Calibrate(a) => commands::calibrate(&cli.common, a),
        Command::Synth(a) => commands::synth(&cli.common, a),
        Command::Init(a) => commands::init(&cli.common, a),
        Command::Track(a) => commands::track(&cli.common, a),
        Command::Eval(a) => commands::eval(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
