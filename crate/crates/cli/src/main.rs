//! `qflaw`: ingest crowd quality annotations, compute statistics, train and
//! evaluate the quality classifiers, and build filtered training manifests.

mod commands;
mod config;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::ConfigError;

/// Environment variable naming the feature cache directory.
pub const FEATURE_CACHE_ENV: &str = "QFLAW_FEATURE_CACHE";

#[derive(Debug, Parser)]
#[command(name = "qflaw", version, about = "Image quality flaw toolkit", propagate_version = true)]
pub struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: config `out`, else ./qflaw-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Reason head variant.
    #[arg(long, global = true, value_parser = ["softmax3", "dual_sigmoid"])]
    pub variant: Option<String>,
    #[arg(long, global = true)]
    pub quorum: Option<usize>,
    /// Annotation file (JSON array of image records).
    #[arg(long, global = true)]
    pub annotations: Option<PathBuf>,
    /// Aggregated labels file; derived from --annotations when absent.
    #[arg(long, global = true)]
    pub aggregated: Option<PathBuf>,
    /// Questions file (JSON array of {image_id, question, answerable}).
    #[arg(long, global = true)]
    pub questions: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an annotation file and write a normalized copy.
    Ingest,
    /// Merge redundant annotations by quorum.
    Aggregate,
    /// Prevalence, conditional and interrelation statistics with plots.
    Stats,
    /// Train the recognizability head and its baselines.
    TrainRec,
    /// Train the eight-channel flaw head.
    TrainFlaws,
    /// Train the unanswerability reason model.
    TrainVqa,
    /// Run a checkpoint over the dataset and write JSON-lines predictions.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a predictions file against the labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Overlap of external quality-score distributions for recognizable vs
    /// unrecognizable images.
    Overlap {
        /// CSV with columns image_id,score.
        #[arg(long)]
        scores: PathBuf,
    },
    /// Build training manifests: full, predicted flag, perfect flag, random sample.
    Filter {
        /// Recognizability predictions (JSON lines) to filter with.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Recognizability checkpoint to filter with.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Baseline manifest size when no predicted manifest fixes it.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Money and time spent annotating unrecognizable images.
    Cost {
        #[arg(long)]
        n_unrecognizable: Option<u64>,
    },
    /// Tabulate downstream results per manifest.
    Report {
        /// Directory of manifest JSON files (default: <out>/manifests).
        #[arg(long)]
        manifests: Option<PathBuf>,
        /// Downstream results CSV.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<qflaw_core::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return "config";
        }
    }
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "json";
        }
    }
    "runtime"
}

fn report_error(kind: &str, message: String) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error("usage", e.to_string().trim_end().to_string());
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(error_kind(&e), format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
