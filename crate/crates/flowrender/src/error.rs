//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("validation: {0}")]
    Validation(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: String, expected: String, got: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("image decode/encode at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage {stage}: {source}")]
    Stage { stage: String, source: Box<FlowError> },
}

impl FlowError {
    pub fn validation(msg: impl Into<String>) -> Self {
        FlowError::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        FlowError::Config(msg.into())
    }

    pub fn shape(what: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        FlowError::ShapeMismatch { what: what.into(), expected: expected.into(), got: got.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlowError::Io { path: path.into(), source }
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Self {
        FlowError::Stage { stage: stage.to_string(), source: Box::new(self) }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlowError::Io { .. } | FlowError::Image { .. } | FlowError::Checkpoint(_) => 1,
            FlowError::Validation(_) | FlowError::ShapeMismatch { .. } | FlowError::Config(_) => 2,
            FlowError::NonFinite { .. } => 3,
            FlowError::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FlowError>;
