use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid unfolding mode {0}, expected 1, 2 or 3")]
    InvalidMode(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model is not identifiable: {0}")]
    Unidentifiable(String),

    #[error("signal tensor is zero, SNR is undefined")]
    ZeroSignal,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("user association failed: {0}")]
    AssociationFailed(String),

    #[error("no detection: correlation is flat below {0:e}")]
    NoDetection(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
