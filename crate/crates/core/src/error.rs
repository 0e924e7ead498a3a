use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the bid-control library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward pass requested before forward evaluation")]
    NotEvaluated,

    #[error("CFL condition violated: {detail}; suggested time step <= {suggested_dt:.6e} ({suggested_substeps} substeps per output step)")]
    Cfl {
        detail: String,
        suggested_dt: f64,
        suggested_substeps: usize,
    },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("controller produced an invalid bid {bid} at period {period}")]
    InvalidBid { bid: f64, period: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: validation loss {val_loss} exceeds 10x initial {initial}")]
    Diverged {
        step: usize,
        val_loss: f64,
        initial: f64,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing file {0}")]
    Missing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn parse_err(context: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.into(),
        message: message.into(),
    }
}
