use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("scene generation failed: {0}")]
    GenerationFailed(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown variant `{0}` (expected one of full, no_ego_to_agent, no_tpm, no_lftg, neither)")]
    UnknownVariant(String),

    #[error("loss became non-finite at epoch {epoch}, step {step}: offending term `{term}`")]
    NonFiniteLoss { epoch: usize, step: usize, term: String },

    #[error("undefined mean over an empty batch in {0}")]
    EmptyBatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
