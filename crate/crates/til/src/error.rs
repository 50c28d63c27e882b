//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TilError {
    /// A line in an interaction file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A dataset ended up with no usable interactions.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A NaN or infinity surfaced where a finite value was required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A model or dataset snapshot is malformed or of an unknown version.
    #[error("snapshot error: {0}")]
    Snapshot(String),

    /// An asserted experiment outcome (e.g. an ordering between
    /// strategies requested via `compare --assert-improvement`) did not
    /// hold.
    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TilError>;

impl TilError {
    /// Process exit code for the CLI: config errors 1, numerical faults
    /// 2, failed outcome assertions 3.
    pub fn exit_code(&self) -> u8 {
        match self {
            TilError::Config(_) | TilError::Parse { .. } | TilError::EmptyDataset(_) => 1,
            TilError::NonFinite(_) => 2,
            TilError::Assertion(_) => 3,
            _ => 1,
        }
    }
}
