//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Error type shared by the whole laboratory.
#[derive(Debug, Error)]
pub enum NpoError {
    /// Shapes or layouts disagree (parameter vector vs. descriptor, context
    /// features vs. network input, gradient vs. parameters).
    #[error("layout error: {0}")]
    Layout(String),

    /// A token id is outside the vocabulary.
    #[error("vocabulary error: token {token} out of range for vocab size {vocab}")]
    Vocab { token: u32, vocab: usize },

    /// A task generator was asked for something it cannot encode.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// The gradient contained a NaN or infinity; training must abort.
    #[error("non-finite gradient at component {index} on step {step}")]
    NanGradient { index: usize, step: u64 },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint for step {step} not found")]
    CheckpointNotFound { step: u64 },

    #[error("checkpoint for step {step} already saved")]
    CheckpointExists { step: u64 },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint checksum mismatch at {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    /// No rollback candidate had a defined quality estimate.
    #[error("rollback selection error: no candidate with a defined quality estimate")]
    NoRollbackCandidate,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Replay verification found a mismatch against the original run.
    #[error("replay diverged at step {step} ({field})")]
    ReplayDivergence { step: u64, field: String },
}

pub type Result<T> = std::result::Result<T, NpoError>;

impl NpoError {
    /// Helper for io errors carrying the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NpoError::Io {
            path: path.into(),
            source,
        }
    }
}
