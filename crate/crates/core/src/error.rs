use std::io;

use thiserror::Error;

/// Errors produced anywhere in the diagnosis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid pairing: {0}")]
    InvalidPairing(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("model not ready: {0}")]
    ModelNotReady(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("singular covariance: {0}")]
    SingularCovariance(String),
    #[error("invalid degrees of freedom: {0}")]
    InvalidDof(String),
    #[error("singular scale matrix: {0}")]
    SingularScale(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("training failure: {0}")]
    TrainingFailure(String),
    #[error("missing class: {0}")]
    MissingClass(String),
    #[error("insufficient batch: {0}")]
    InsufficientBatch(String),
    #[error("invalid class: {0}")]
    InvalidClass(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
