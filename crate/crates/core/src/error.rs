use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FatError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error in {field}: {detail}")]
    Parse { field: String, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    /// The classifier is locally constant, so no direction is preferred.
    #[error("degenerate direction: {0}")]
    Degenerate(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("undefined input: {0}")]
    Undefined(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
        /// Checkpoint encoding of the parameters at the start of the failing step.
        snapshot: Vec<u8>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FatError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        FatError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FatError::Io {
            path: path.into(),
            source,
        }
    }
}
