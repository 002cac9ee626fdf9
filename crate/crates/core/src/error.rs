use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("non-finite value {value} at index {index:?}")]
    NonFinite { index: Vec<usize>, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel mismatch: expected {expected} channels, got {actual}")]
    Channels { expected: usize, actual: usize },

    #[error("label {label} out of range [0, {num_classes}) at (image {image}, row {row}, col {col})")]
    LabelOutOfRange {
        label: i64,
        num_classes: usize,
        image: usize,
        row: usize,
        col: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("NaN or infinite gradient for parameter `{0}`")]
    BadGradient(String),

    #[error("missing input: {0}")]
    MissingInput(&'static str),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
