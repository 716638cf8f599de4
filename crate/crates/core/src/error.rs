use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("dataset generation failed at sample {index}: {reason}")]
    Generation { index: usize, reason: String },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: missing required field `{field}`")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
    },

    #[error("non-finite value in loss term `{term}`")]
    Numeric { term: String },

    #[error("training diverged at epoch {epoch}: non-finite `{term}`")]
    Divergence { epoch: usize, term: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("gradient check failed for: {}", groups.join(", "))]
    GradCheck { groups: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
