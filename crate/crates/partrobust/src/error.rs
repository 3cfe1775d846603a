//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
///
/// The variants separate caller mistakes (`Config`, `Usage`, `Data`) from
/// numeric failures discovered at run time (`Numeric`, `NonFiniteLoss`), so
/// the CLI can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data violates a documented invariant.
    #[error("data error: {0}")]
    Data(String),
    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Training hit a non-finite loss; carries the diagnostic context.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {components}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        components: String,
    },
    /// A checkpoint file could not be read or does not match its config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
