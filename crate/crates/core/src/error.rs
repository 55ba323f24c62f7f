use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("undefined boundary: {0}")]
    UndefinedBoundary(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ContractViolation(_) => "contract_violation",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Generation(_) => "generation",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::UndefinedBoundary(_) => "undefined_boundary",
            Error::EmptyDataset(_) => "empty_dataset",
        }
    }

    /// True for errors caused by user input (bad config, missing files, bad
    /// arguments) as opposed to internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::ContractViolation(_) | Error::NonFiniteLoss { .. })
    }
}
