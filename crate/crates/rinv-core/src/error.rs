//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration document is invalid (unknown key, bad value, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Model assembly failed (incompatible consecutive layers, ...).
    #[error("build error: {0}")]
    Build(String),

    /// A binary file does not follow its documented format.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Training produced a non-finite loss; last good state was kept.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn build(msg: impl Into<String>) -> Self {
        Error::Build(msg.into())
    }
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
