use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // containers and files
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what} at {path}: {message}")]
    Format {
        what: &'static str,
        path: PathBuf,
        message: String,
    },
    #[error("missing array `{0}`")]
    MissingArray(String),
    #[error("array `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("array `{name}`: index {index} out of range (limit {limit})")]
    IndexOutOfRange { name: String, index: i64, limit: usize },
    #[error("array `{name}`: unsupported dtype `{dtype}`")]
    Dtype { name: String, dtype: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    // tracking
    #[error("need at least 3 landmark correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point configuration (source covariance rank {rank} < 2)")]
    DegenerateConfiguration { rank: usize },
    #[error("normal equations are not positive definite")]
    SingularSystem,
    #[error("only {visible} vertices visible, need at least {needed}")]
    TooFewVisible { visible: usize, needed: usize },
    #[error("empty frame sequence")]
    EmptySequence,

    // rasterizer / windowing
    #[error("no landmarks given")]
    EmptyLandmarks,
    #[error("window {origin:?}+{size:?} lies outside canvas {canvas:?}")]
    WindowOutOfBounds {
        origin: (i64, i64),
        size: (usize, usize),
        canvas: (usize, usize),
    },
    #[error("box {box_size:?} does not fit in {full_size:?}")]
    BoxTooLarge {
        box_size: (usize, usize),
        full_size: (usize, usize),
    },

    // networks / training
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },

    // datasets / pipeline
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("missing input {0}")]
    MissingInput(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            what,
            path: path.into(),
            message: message.to_string(),
        }
    }
}
