use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Gradient vanished while the loss is still above the floor.
    #[error("stationary point with nonzero loss {loss:e} (|J|^2 = {grad_norm_sq:e})")]
    Stationary { loss: f64, grad_norm_sq: f64 },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("nothing to crop: mask is empty")]
    EmptyCrop,

    #[error("format error: {0}")]
    Format(String),
}

pub(crate) fn dim_err(what: impl Into<String>) -> Error {
    Error::Dimension(what.into())
}
