//! Error taxonomy for the whole engine.
//!
//! Shape errors name both offending shapes so a failed matmul deep inside a
//! training step is diagnosable without a debugger. Config and parse errors
//! are kept distinct from runtime contract violations because the CLI maps
//! them to different exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between two operands of a tensor op.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A documented precondition of an API was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The run configuration is invalid (bad field value, unknown key,
    /// inconsistent combination). Reported before any compute starts.
    #[error("invalid config: {0}")]
    Config(String),

    /// A data file could not be parsed. Carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
