use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A precondition of an operation was violated (non-scalar loss, Δ ≤ 0, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The window specification does not tile the token grid.
    #[error("window error: {dim} = {extent} is not divisible by window extent {window}")]
    Window {
        dim: &'static str,
        extent: usize,
        window: usize,
    },

    /// Layer pattern DSL error, `position` is a 0-based byte offset into the source.
    #[error("pattern parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("config not found: {}", .0.display())]
    ConfigNotFound(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error("tensor format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss or gradient.
    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
