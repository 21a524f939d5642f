use std::io;
use std::path::PathBuf;

use thiserror::Error;
use vinil_tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("model: {0}")]
    Model(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("strategy: {0}")]
    Strategy(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("checkpoint at byte {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
