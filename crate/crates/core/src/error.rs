use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate mask: query row {row} has no permitted key")]
    DegenerateMask { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("finite-difference oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("streaming order error: {0}")]
    StreamingOrder(String),

    #[error("late mode switch: chunk {requested} already emitted, earliest switchable chunk is {earliest}")]
    LateSwitch { requested: usize, earliest: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
