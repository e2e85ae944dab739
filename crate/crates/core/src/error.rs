use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum CfcmlError {
    #[error("no template registered for attribute `{0}`")]
    UnknownAttribute(String),

    #[error("attribute `{0}` has an empty value")]
    EmptyValue(String),

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("corrupt tensor blob {path}: {reason}")]
    CorruptBlob { path: PathBuf, reason: String },

    #[error("batch cannot contain two distinct classes: {0}")]
    SingleClassBatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint does not match configuration: field `{field}` (checkpoint {checkpoint}, config {config})")]
    ConfigMismatch {
        field: String,
        checkpoint: String,
        config: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CfcmlError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CfcmlError::Io {
            context: context.into(),
            source,
        }
    }

    /// Validation errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CfcmlError::Config(_)
                | CfcmlError::UnknownAttribute(_)
                | CfcmlError::EmptyValue(_)
                | CfcmlError::InvalidDims(_)
        )
    }
}

pub type Result<T, E = CfcmlError> = std::result::Result<T, E>;
