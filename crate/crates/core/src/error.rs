use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("regime index {index} out of range 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("all importance weights are zero")]
    DegenerateWeights,
    #[error("regime proposal assigns zero probability to a sampled regime")]
    ProposalSupport,
    #[error("expected {expected} observations, got {got}")]
    ObservationLength { expected: usize, got: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable machine-readable tag, used for CLI error lines and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Autodiff(_) => "autodiff",
            Error::Config(_) => "config",
            Error::Validation(_) | Error::IndexOutOfRange { .. } => "validation",
            Error::DegenerateWeights | Error::ProposalSupport => "degenerate",
            Error::ObservationLength { .. } => "observation_length",
            Error::Parse { .. } | Error::Json(_) => "parse",
            Error::Version { .. } => "version",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
        }
    }
}
