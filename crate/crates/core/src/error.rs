use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("schema error: unknown parameter name `{0}`")]
    Schema(String),
    #[error("merge error: {0}")]
    Merge(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("numeric failure in round {round}, client {client}: {msg}")]
    Numeric {
        round: usize,
        client: usize,
        msg: String,
    },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
