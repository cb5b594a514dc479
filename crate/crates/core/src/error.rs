//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file structure (bad magic, header, unsupported dtype).
    #[error("format error: {0}")]
    Format(String),

    /// Paired files disagree (array shape vs manifest, duplicate indices).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Invalid values in otherwise well-formed data (NaN/Inf, bad ranges).
    #[error("data error: {0}")]
    Data(String),

    /// Matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Labels required for an operation are missing.
    #[error("label error: {0}")]
    Label(String),

    /// Input too degenerate for the requested computation.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Invalid configuration or missing configuration entries.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite intermediate results or values below numeric floors.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}
