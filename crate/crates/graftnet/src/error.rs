//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tensor ops, model construction, data loading, and training.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or rank mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (divisibility, window sizes, ranges).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset, manifest, or file-format problem.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or failed numerical contract.
    #[error("numerical error: {0}")]
    Numerics(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }
}
