use thiserror::Error;

use crate::agent::Requirement;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {field}: {msg}")]
    Parse {
        line: usize,
        field: String,
        msg: String,
    },

    #[error("model is untrained: {0}")]
    Untrained(String),

    #[error("no scene reaches similarity threshold for requirement from `{}`", .0.source_failure)]
    NoMatches(Box<Requirement>),

    #[error("zero keywords extractable from description")]
    EmptyRequirement,

    #[error("transport error after {attempts} attempt(s): {msg}")]
    Transport { attempts: usize, msg: String },

    #[error("training diverged at step {step}: loss {loss} vs initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
