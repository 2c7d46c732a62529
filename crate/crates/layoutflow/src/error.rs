//! Crate-wide error type. Variants mirror the failure classes the
//! operations document: bad arguments, exceeded capacities, malformed
//! files, broken call contracts, and numeric breakdown.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the operation's stated domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A fixed capacity (element count, category budget) was exceeded.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A file or record does not match the expected schema.
    #[error("format error: {0}")]
    Format(String),

    /// Caller broke an API contract (mismatched shapes, wrong head, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric routine failed (non-PSD covariance, NaN loss, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
