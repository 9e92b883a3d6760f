//! Error type shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad mixture, zero stride, inconsistent shapes...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input handed to an operation (id out of range, question too long...).
    #[error("input error: {0}")]
    Input(String),

    /// A JSONL artifact contained a line that does not parse.
    #[error("{path}:{line}: malformed line: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A prerequisite artifact (corpus, checkpoint, prediction file) is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    /// Artifacts from different corpora were mixed in one command.
    #[error("fingerprint mismatch: {left} vs {right} ({context})")]
    FingerprintMismatch {
        left: String,
        right: String,
        context: String,
    },

    /// Non-finite values where finite ones are required (params, gradients).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint failed to load or had an unexpected shape.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// API misuse (backward before forward, stream mismatch...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
