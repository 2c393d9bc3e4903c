// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not agree for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index fell outside its valid domain.
    #[error("{what} {value} out of range [0, {bound})")]
    Range {
        what: &'static str,
        value: usize,
        bound: usize,
    },

    /// A value became NaN or infinite.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Binary file could not be decoded.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Binary file was written by an incompatible version.
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f32 },

    /// A line of a text input (JSON Lines, config file) could not be parsed.
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Configuration is incomplete or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A steering backend failed.
    #[error(transparent)]
    Backend(#[from] crate::steering::BackendError),

    /// External labeling service failed.
    #[error("labeling service error: {0}")]
    Label(String),

    #[error("i/o error on {path}: {source}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
