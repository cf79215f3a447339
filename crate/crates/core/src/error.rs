use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error for image `{image_id}`, field `{field}`: {message}")]
    Validation {
        image_id: String,
        field: String,
        message: String,
    },

    #[error("insufficient redundancy for image `{image_id}`: {available} annotations, quorum {quorum}")]
    InsufficientRedundancy {
        image_id: String,
        available: usize,
        quorum: usize,
    },

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("undefined interrelation index: degenerate marginal {marginal} = {value}")]
    UndefinedIndex { marginal: &'static str, value: f64 },

    #[error("join error: {what} missing for ids {missing:?}")]
    Join { what: String, missing: Vec<String> },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },

    #[error("degenerate training set: {0}")]
    DegenerateTraining(String),

    #[error("training diverged at step {step} (non-finite loss)")]
    Divergence {
        step: usize,
        /// Serialized checkpoint of the last parameters that produced a finite loss.
        last_good: Option<String>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid split or selection parameters: {0}")]
    Spec(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::InsufficientRedundancy { .. } => "insufficient_redundancy",
            Error::UndefinedStatistic(_) => "undefined_statistic",
            Error::UndefinedIndex { .. } => "undefined_index",
            Error::Join { .. } => "join",
            Error::Decode { .. } => "decode",
            Error::Config(_) => "config",
            Error::Schema(_) => "schema",
            Error::Dimension { .. } => "dimension",
            Error::DegenerateTraining(_) => "degenerate_training",
            Error::Divergence { .. } => "divergence",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Spec(_) => "spec",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
