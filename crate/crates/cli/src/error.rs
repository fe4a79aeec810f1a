use std::path::PathBuf;

use nsp_core::datasets::DatasetError;
use nsp_core::ensemble::EnsembleError;
use nsp_core::metrics::MetricsError;
use nsp_core::tagger::TaggerError;
use serde_json::json;
use thiserror::Error;

/// Failures that abort a command. All of them map to exit code 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tagger(#[from] TaggerError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "malformed_json",
            CliError::Dataset(_) => "dataset",
            CliError::Tagger(_) => "lexicon",
            CliError::Ensemble(EnsembleError::NonFiniteLoss { .. }) => "non_finite_loss",
            CliError::Ensemble(_) => "gate",
            CliError::Metrics(_) => "metrics",
        }
    }

    /// The machine-readable record written to stderr.
    pub fn record(&self) -> serde_json::Value {
        json!({ "error": self.code(), "message": self.to_string() })
    }
}

/// Exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Completion {
    pub instance_errors: usize,
}

impl Completion {
    pub const OK: Completion = Completion { instance_errors: 0 };

    pub fn exit_code(self) -> i32 {
        if self.instance_errors == 0 {
            0
        } else {
            1
        }
    }
}

pub const EXIT_FAILURE: i32 = 2;
