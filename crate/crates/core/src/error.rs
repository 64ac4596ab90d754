use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: String,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("unknown feature id `{0}`")]
    Lookup(String),

    #[error("feature `{id}` has dimension {found}, expected {expected}")]
    Dimension {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("no labeled nodes in batch")]
    EmptyBatch,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op: op.into(),
            left,
            right,
        }
    }

    /// Stable machine-readable code for this error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Lookup(_) => "lookup",
            Error::Dimension { .. } => "dimension",
            Error::Format(_) => "format",
            Error::Consistency(_) => "consistency",
            Error::Config(_) => "config",
            Error::Graph(_) => "graph",
            Error::EmptyBatch => "empty_batch",
            Error::NonFinite { .. } => "non_finite",
            Error::Manifest { .. } => "manifest",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True when the error stems from bad input or usage rather than a
    /// numeric or internal failure during a run.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Internal(_) | Error::Shape { .. }
        )
    }
}
