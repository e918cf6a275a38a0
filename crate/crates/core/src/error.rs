//! Error type shared across the crate. Faults are things the caller did wrong
//! or a file that lied about itself; recoverable conditions (invalid
//! projections, void rays, degenerate weights) are data, not errors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad tensor file {path}: {reason}")]
    TensorFormat { path: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("bad manifest {path}: {reason}")]
    Manifest { path: String, reason: String },

    #[error("json error on {path}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("no valid views for blending")]
    NoValidViews,

    #[error("render produced no coverage inside the evaluation mask")]
    VoidRender,

    #[error("unknown operator id {0}")]
    UnknownOperator(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("bad configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
