use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("unknown image id {0:?}")]
    UnknownImage(String),

    #[error("empty tag on image {0:?}")]
    EmptyTag(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("image {image} is not annotated with tag {tag:?}")]
    NotAnnotated { tag: String, image: usize },

    #[error("empty point set for tag {0:?}")]
    EmptyPointSet(String),

    #[error("unknown tag {0:?}")]
    UnknownTag(String),

    #[error("keyword {0:?} does not resolve to any theme")]
    UnknownKeyword(String),

    #[error("tag orderings of the two matrices differ")]
    TagOrderMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("eigensolver failed: {message}")]
    EigenSolver {
        message: String,
        residual: Option<f64>,
    },

    #[error("query has {got} dimensions, forest was trained on {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("empty hybrid neighbour set")]
    EmptyNeighborSet,

    #[error("no VCDL recorded for tag {0:?}")]
    MissingVcdl(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
