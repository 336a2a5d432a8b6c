//! Error type shared across the crate.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor construction or operation received incompatible shapes.
    ShapeMismatch(String),
    /// An operation precondition failed (bad stride, kernel larger than input, ...).
    InvalidArgument(String),
    /// Matrix passed to Cholesky is not positive definite after jitter.
    NotPositiveDefinite { pivot: usize, value: f64 },
    /// Backward called twice on the same tape without a new forward pass.
    BackwardAlreadyRun,
    /// A trainable parameter had no gradient when the optimizer stepped.
    MissingGradient(String),
    /// Loss became NaN during training.
    NanLoss { iteration: usize, batch_index: usize },
    /// Malformed on-disk data (netpbm files, checkpoints, manifests, configs).
    Format(String),
    /// I/O error with the path that produced it.
    Io { path: String, source: io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NotPositiveDefinite { pivot, value } => write!(
                f,
                "matrix not positive definite: pivot {pivot} has value {value:e}"
            ),
            Error::BackwardAlreadyRun => {
                write!(f, "backward already run on this tape; record a new forward pass first")
            }
            Error::MissingGradient(name) => {
                write!(f, "missing gradient for trainable parameter `{name}`")
            }
            Error::NanLoss { iteration, batch_index } => write!(
                f,
                "loss is NaN at iteration {iteration} (batch index {batch_index})"
            ),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on `{path}`: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
