use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the lifting lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data has no usable variation (zero variance, rank-deficient
    /// point sets, ...).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// Geometry that a camera model cannot handle, e.g. points behind a
    /// perspective camera.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// NaN or Inf produced during a forward/backward pass; `context` names
    /// the layer (and, during training, the epoch/batch) where it appeared.
    #[error("numerical failure in {context}")]
    NumericalFailure { context: String },

    /// A dataset or checkpoint file failed structural validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed dataset file; `line` is 1-based.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateData(msg.into())
    }

    pub fn numerical(context: impl Into<String>) -> Self {
        Error::NumericalFailure {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DegenerateData(_) => "degenerate-data",
            Error::InvalidGeometry(_) => "invalid-geometry",
            Error::NumericalFailure { .. } => "numerical-failure",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}
