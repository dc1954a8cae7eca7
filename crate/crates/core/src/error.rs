use thiserror::Error;

/// Errors raised by the kernel solver library.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes, out-of-range parameters, malformed files.
    #[error("input error: {0}")]
    Input(String),
    /// Factorization failures, divergence, rank deficiency.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}

pub(crate) fn numeric<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Numeric(msg.into()))
}
