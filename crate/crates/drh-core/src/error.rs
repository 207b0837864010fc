//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A layer or operation received a tensor whose shape it cannot accept.
    #[error("{layer}: expected {expected}, got shape {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },

    /// NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    /// Invalid configuration (network geometry, hyperparameters, flags).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Backward called without a matching train-mode forward, or with a
    /// gradient that does not match the cached activations.
    #[error("backward/cache mismatch: {0}")]
    CacheMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A binary file did not start with the expected magic bytes.
    #[error("{path}: bad magic, expected {expected}")]
    BadMagic { path: String, expected: String },

    /// A binary file ended before the declared payload.
    #[error("{path}: truncated ({detail})")]
    Truncated { path: String, detail: String },

    /// A label name not present in the vocabulary.
    #[error("unknown label {label:?} (line {line})")]
    UnknownLabel { label: String, line: usize },

    /// Item ids in a label file do not line up with the image file.
    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    /// Two codes (or code files) with different bit counts were combined.
    #[error("code length mismatch: {a} vs {b} bits")]
    CodeLengthMismatch { a: usize, b: usize },

    /// Covariance has fewer nonzero eigenvalues than requested bits.
    #[error("rank-deficient features: need {needed} components, attained rank {attained}")]
    RankDeficient { needed: usize, attained: usize },

    /// A numerical procedure failed (non-finite gradient, diverged loss,
    /// failed convergence, failed gradient check).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every query was skipped; there is nothing to average.
    #[error("no evaluable queries: {0}")]
    NoQueries(String),
}

impl Error {
    pub fn shape(layer: impl Into<String>, expected: impl Into<String>, got: &[usize]) -> Self {
        Error::ShapeMismatch {
            layer: layer.into(),
            expected: expected.into(),
            got: format!("{got:?}"),
        }
    }
}
