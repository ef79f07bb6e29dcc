use thiserror::Error;

/// Errors produced by the weight-space symmetry library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape error at layer {layer}: {detail}")]
    LayerShape { layer: usize, detail: String },

    #[error("parse error at {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported weight-space spec: {0}")]
    Unsupported(String),

    #[error("problem too large for brute force: {0}")]
    ScaleLimit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
