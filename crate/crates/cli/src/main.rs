mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Attention-guided context compression for retrieval-augmented generation.
#[derive(Parser, Debug)]
#[command(name = "attncomp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score and compress every sample of a dataset
    Compress {
        #[arg(long)]
        dataset: PathBuf,
        /// `bundle:DIR` or `synthetic:[key=value,...]`
        #[arg(long, default_value = "synthetic:")]
        provider: String,
        /// Cross-attention weights; needed for hidden-state input
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "doc")]
        granularity: String,
        #[arg(long, default_value_t = 0.95)]
        top_p: f64,
        /// Defaults to 0.01 for documents and 0.001 for sentences
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train cross-attention weights
    Train {
        /// Directory of hidden-state bundles with `labels.json`, or a JSONL
        /// dataset rendered through the synthetic provider
        #[arg(long)]
        dataset: PathBuf,
        /// TOML training configuration
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label relevant documents by repeated shuffled compression
    Annotate {
        #[arg(long)]
        dataset: PathBuf,
        /// `echo`, `cmd:PROGRAM ARGS`, or `[tcp://]HOST:PORT`
        #[arg(long)]
        generator: String,
        #[arg(long, default_value_t = 3)]
        shuffles: usize,
        #[arg(long, default_value_t = 0.95)]
        top_p: f64,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, default_value = "synthetic:")]
        provider: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Replacement pool for negatives; defaults to all dataset documents
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress, optionally generate, and write metric reports
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        generator: Option<String>,
        #[arg(long, default_value = "synthetic:")]
        provider: String,
        #[arg(long, default_value = "doc")]
        granularity: String,
        #[arg(long, default_value_t = 0.95)]
        top_p: f64,
        #[arg(long)]
        epsilon: Option<f64>,
        /// `contains` or `exact`
        #[arg(long, default_value = "contains")]
        accuracy: String,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Decile calibration of confidence against a per-record metric
    ConfidenceReport {
        /// `records.jsonl` from `evaluate`
        #[arg(long)]
        records: PathBuf,
        /// `f1`, `accuracy` or `answerable`
        #[arg(long, default_value = "f1")]
        metric: String,
        /// `fixed` or `quantile`
        #[arg(long, default_value = "fixed")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Write a planted-relevance JSONL dataset
    Synth {
        #[arg(long, default_value_t = 200)]
        positives: usize,
        /// Defaults to a third of the positives
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long, default_value_t = 8)]
        docs: usize,
        /// Planted documents per positive sample, `LO..HI` or `N`
        #[arg(long, default_value = "1..3")]
        relevant: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// How a command finished when it did not fail outright.
pub enum Status {
    Done,
    /// Some records failed and were skipped.
    Partial(usize),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial(n)) => {
            eprintln!("{n} record(s) failed; see the output for details");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
