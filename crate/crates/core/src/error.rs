//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CqnpError {
    /// Invalid configuration: bad specs, shapes, or option combinations.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A quantity left its mathematical domain (probabilities, quantile
    /// levels, scales).
    #[error("domain error: {0}")]
    Domain(String),

    /// Training or evaluation produced non-finite numbers.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Data generation failed (e.g. covariance factorization).
    #[error("generation error: {0}")]
    Generation(String),

    /// A file had the wrong layout or magic.
    #[error("format error: {0}")]
    Format(String),

    /// Malformed ingest data, with position information where available.
    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CqnpError {
    /// CLI exit code: 2 for usage/config problems, 3 for numerical failure,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CqnpError::Config(_) | CqnpError::Usage(_) | CqnpError::Domain(_) => 2,
            CqnpError::Numerical(_) => 3,
            _ => 1,
        }
    }
}
