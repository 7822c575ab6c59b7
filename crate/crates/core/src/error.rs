use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: field `{field}`: {message}")]
    Parse {
        file: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("dangling image references: {}", ids.join(", "))]
    Dangling { ids: Vec<String> },

    #[error("{file}: non-finite feature value in row {row} (image `{image_id}`)")]
    NonFinite {
        file: String,
        row: usize,
        image_id: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("covariance is singular after ridge {cov_reg}; try a larger cov_reg")]
    SingularCovariance { cov_reg: f64 },

    #[error("{0} requires a differentiable model, not a prediction dump")]
    NotDifferentiable(&'static str),

    #[error("could not construct {what} after {attempts} attempts")]
    Exhausted { what: &'static str, attempts: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
