use std::path::PathBuf;

use roicae_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("ROI mask is empty or smaller than 4 pixels")]
    EmptyMask,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("leave-one-site-out violation: {0}")]
    Leakage(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<CoreError>,
    },
}

impl CoreError {
    pub fn context(self, context: impl Into<String>) -> Self {
        CoreError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable kind, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::Numerics(_) => "numerics",
            CoreError::Invalid(_) => "invalid_argument",
            CoreError::Io { .. } => "io",
            CoreError::Corrupt { .. } => "corrupt_file",
            CoreError::CheckpointMismatch(_) => "checkpoint_mismatch",
            CoreError::UnknownSite(_) => "unknown_site",
            CoreError::EmptyMask => "empty_mask",
            CoreError::NonFiniteLoss { .. } => "non_finite_loss",
            CoreError::Degenerate(_) => "degenerate",
            CoreError::Leakage(_) => "leakage",
            CoreError::Context { source, .. } => source.kind(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Invalid(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}
