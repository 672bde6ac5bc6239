//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: String, detail: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// API used out of contract (e.g. backward before forward).
    #[error("usage error: {0}")]
    Usage(String),

    /// Problem with input data (CSV parsing, empty splits, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Not enough data to carry out the operation.
    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape { op: op.to_string(), detail: detail.into() }
    }

    pub fn non_finite(op: &str, detail: impl Into<String>) -> Self {
        Error::NonFinite { op: op.to_string(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
