use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HglError>;

#[derive(Debug, Error)]
pub enum HglError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("schema error at line {line}: {reason}")]
    Schema { line: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HglError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        HglError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HglError::Io {
            path: path.into(),
            source,
        }
    }
}
