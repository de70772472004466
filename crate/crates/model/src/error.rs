use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] topocl_core::Error),

    #[error(transparent)]
    Nn(#[from] topocl_nn::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape contract violated: {0}")]
    ShapeContract(String),

    #[error("contrastive batch needs at least 2 instances, got {0}")]
    BatchTooSmall(usize),

    #[error("infeasible corpus geometry: {0}")]
    Infeasible(String),

    #[error("linear probe needs at least two classes")]
    SingleClass,

    #[error("degenerate test input: {0}")]
    Degenerate(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
