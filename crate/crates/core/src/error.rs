use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the kernel toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: &'static str },

    #[error("dataset fingerprint {actual} does not match trajectory fingerprint {expected}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error(
        "kernel machine reduction refused: loss gradients change along the path \
         (step {step}, train point {index}, deviation {deviation:e})"
    )]
    ReductionRefused {
        step: usize,
        index: usize,
        deviation: f64,
    },

    #[error("non-finite kernel block at ({row}, {col})")]
    NonFiniteBlock { row: usize, col: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Broad category, used by front ends to choose an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Input(_) | Error::FingerprintMismatch { .. } => {
                ErrorKind::Validation
            }
            Error::Json(_) => ErrorKind::Validation,
            Error::Diverged { .. }
            | Error::ReductionRefused { .. }
            | Error::NonFiniteBlock { .. }
            | Error::Numerical(_) => ErrorKind::Numerical,
            Error::Format { .. } | Error::Io { .. } | Error::Csv(_) => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
