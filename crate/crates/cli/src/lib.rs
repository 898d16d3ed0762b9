//! `taskseq` command-line entry points and the observer session service.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod server;

pub use commands::{format_accuracy_table, run};

#[derive(Debug, Parser)]
#[command(name = "taskseq", version, about = "Max-margin robot task sequencing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the demonstration corpus as JSON lines.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; also writes `<out>.log` with one line per cutting-plane iteration.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Train the primitive-only baseline instead.
        #[arg(long)]
        multiclass: bool,
    },
    /// Cross-validate the full model against the chance and multiclass baselines.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 6)]
        folds: usize,
        #[command(flatten)]
        train: TrainArgs,
        /// Write the full report (metrics, predictions, rollouts) as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out sequence accuracy under attribute flips, five noise seeds per probability.
    NoiseSweep {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 6)]
        folds: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4")]
        noise_probs: Vec<f64>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sequence accuracy with simulated top-k oracle feedback.
    FeedbackEval {
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluate this model on the whole corpus instead of cross-validating.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        #[arg(long, default_value_t = 6)]
        folds: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Roll a model out on one corpus scenario.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        scenario: String,
        /// Oracle feedback from the recorded demonstration with this many proposals.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
    },
    /// Run the recipe suite: several tasks chained in one scene.
    Chain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expert feedback over this many proposals at every step.
        #[arg(long)]
        k: Option<usize>,
        /// Only this recipe scenario.
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Serve the observer session API.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long = "C", default_value_t = 1000.0)]
    pub c: f64,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    First,
    All,
}

/// Parses `argv` and runs it. Usage errors return 2, failures 1.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
