use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("malformed annotation: {0}")]
    MalformedAnnotation(String),

    #[error("missing field `{0}` in annotation")]
    MissingField(&'static str),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("degenerate rectangle for label `{label}`: {width}x{height}")]
    DegenerateRectangle {
        label: String,
        width: f64,
        height: f64,
    },

    #[error("box {0:?} lies outside a {1}x{2} image")]
    OutOfBounds([f64; 4], usize, usize),

    #[error("need at least {needed} boxes, got {got}")]
    InsufficientBoxes { needed: usize, got: usize },

    #[error("class vocabularies differ: {0:?} vs {1:?}")]
    VocabularyMismatch(Vec<String>, Vec<String>),

    #[error("no class has ground truth instances")]
    NoEvaluableClasses,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad image file {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },

    #[error("bad tensor file: {0}")]
    BadTensorFile(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse failure classes, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite(_) => ErrorClass::Numeric,
            Error::InvalidArgument(_) | Error::InvalidConfig(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
