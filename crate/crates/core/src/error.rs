//! Error types shared across the crate.

use std::path::PathBuf;

/// Errors produced by tensor ops, the data protocol, training and IO.
#[derive(Debug, thiserror::Error)]
pub enum CfilError {
    /// Two shapes that must agree do not; names both sides.
    #[error("dimension error in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Non-finite values or values outside a documented numeric guard.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke an API contract (e.g. non-scalar backward root).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input exceeds a configured capacity budget.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Invalid configuration (flag values, family counts, fold ids).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed runtime input (bad labels, batch mismatches).
    #[error("input error: {0}")]
    Input(String),

    /// A text file failed to parse; carries the 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A binary file is truncated or structurally malformed.
    #[error("malformed file: {0}")]
    Malformed(String),

    /// Filesystem failure, naming the path involved.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file or checkpoint is structurally valid but incompatible.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// Reports that cannot be combined (e.g. differing relation sets).
    #[error("aggregation error: {0}")]
    Aggregation(String),
}

impl CfilError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CfilError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CfilError>;
