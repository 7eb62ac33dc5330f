use thiserror::Error;

/// Errors produced by mesh construction, assembly and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("spaces live on different meshes")]
    MeshMismatch,

    #[error("linear solve failed ({reason}); achieved relative residual {residual:e}")]
    Solve { reason: String, residual: f64 },

    #[error("eigenvalue iteration did not converge after {iterations} steps")]
    NoConvergence { iterations: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
