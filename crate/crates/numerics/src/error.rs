use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        detail: String,
    },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

pub(crate) fn mismatch(op: &'static str, dim: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        dim,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
