//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RaemepcError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("graph state: {0}")]
    GraphState(String),

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl RaemepcError {
    /// Process exit code for the CLI: 2 for usage/config/data problems,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RaemepcError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, RaemepcError>;
