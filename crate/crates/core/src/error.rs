use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] ndiff::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("example '{id}': {message}")]
    InvalidExample { id: String, message: String },
    #[error("overlapping roles in example '{0}'")]
    OverlappingRoles(String),
    #[error("ambiguous-lexicon: token '{0}' belongs to more than one role")]
    AmbiguousLexicon(String),
    #[error("empty-class: class {0} has no examples")]
    EmptyClass(usize),
    #[error("zero-vector: cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty score list: {0}")]
    EmptyScores(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("unsupported format: expected '{expected}', found '{found}'")]
    Format { expected: String, found: String },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Numeric failures (divergence, non-finite values) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NonFiniteLoss { .. }
                | Error::Tensor(ndiff::Error::NonFinite(_))
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
