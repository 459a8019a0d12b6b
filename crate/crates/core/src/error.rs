// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by the steering engine.
#[derive(Debug, thiserror::Error)]
pub enum SekaError {
    /// An argument violated an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An iterative kernel did not converge.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A model configuration violated its invariants.
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    /// An edit plan does not fit the model or bank it is applied to.
    #[error("invalid edit plan: {0}")]
    InvalidPlan(String),

    /// A span could not be located in a tokenized prompt.
    #[error("span resolution failed for item {index}: {reason}")]
    SpanResolution {
        /// Index of the offending triplet or dataset pair.
        index: usize,
        /// What went wrong.
        reason: String,
    },

    /// A contrastive sample violated its invariants.
    #[error("invalid sample: {0}")]
    InvalidSample(String),

    /// Not enough unique template combinations for the request.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Unbalanced highlight markers.
    #[error("parse error at byte {offset}: {message}")]
    Parse {
        /// Byte offset of the offending marker in the input.
        offset: usize,
        /// Description.
        message: String,
    },

    /// A versioned file carried an unknown `format_version`.
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion {
        /// Version found in the file, if any.
        found: i64,
        /// Version this build reads and writes.
        expected: i64,
    },

    /// A file did not match its schema.
    #[error("schema error at {path}: {message}")]
    Schema {
        /// JSON path of the offending value, e.g. `samples[0].answer1`.
        path: String,
        /// Description.
        message: String,
    },

    /// Filesystem failure.
    #[error("io error on {path}: {source}")]
    Io {
        /// File involved.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },
}

impl SekaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Convenience alias.
pub type Result<T> = std::result::Result<T, SekaError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SekaError {
    SekaError::InvalidInput(msg.into())
}
