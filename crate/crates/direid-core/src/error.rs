//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Unified error for dataset, network, training, and evaluation failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Filesystem failure with the offending path attached.
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// PNG decode/encode failure.
    #[error("image codec failure on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },

    /// Manifest ingestion failure, pointing at the file and 1-based line.
    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// Tensor or feature shape disagreement.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// Out-of-domain scalar argument (gamma, ratio, margins, ...).
    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Inconsistent or invalid configuration values.
    #[error("invalid config: {0}")]
    Config(String),

    /// Missing prerequisite state (absent checkpoint, unloaded weights, ...).
    #[error("state error: {0}")]
    State(String),

    /// Batch composition that cannot satisfy the sampling contract.
    #[error("sampler error: {0}")]
    Sampler(String),

    /// Evaluation protocol violation (no valid query, empty gallery, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Checkpoint container problems (bad magic, version, config mismatch).
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    /// Convenience constructor for i/o errors carrying their path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convenience constructor for shape mismatches.
    pub fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
