use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON at line {line}: {message}")]
    Json { line: usize, message: String },

    #[error("missing label at line {line}")]
    MissingLabel { line: usize },

    #[error("invalid UTF-8 at line {line}")]
    Utf8 { line: usize },

    #[error("invalid example at line {line}: {message}")]
    InvalidExample { line: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what} out of range: {index} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "metaphor classifier held-out accuracy {accuracy:.4} is below the {threshold} gate; \
         enlarge the synthetic corpus (--n-labelled) or train for more epochs"
    )]
    ClassifierGate { accuracy: f64, threshold: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
