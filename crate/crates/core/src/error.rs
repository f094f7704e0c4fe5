use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("dtype mismatch in {path}: expected \"f32le\", found {found:?}")]
    DtypeMismatch { path: PathBuf, found: String },

    #[error("threshold not reached before horizon t = {horizon}")]
    HorizonExceeded { horizon: f64 },

    #[error("CFL violation: dt * max|u| / dx = {cfl:.3} >= 1")]
    Cfl { cfl: f64 },

    #[error("integration produced non-finite state at step {step}")]
    Diverged { step: usize },

    #[error("training loss became non-finite at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
