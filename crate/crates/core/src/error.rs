use std::path::PathBuf;

use texrect_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("manifest error at line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("image error for {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Image { path: path.into(), detail: detail.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
