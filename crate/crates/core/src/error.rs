use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's precondition (empty cloud, `k > N`, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Inputs are individually valid but cannot be combined.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no inlier points survived filtering")]
    NoInliers,

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("too sparse: {0}")]
    TooSparse(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in result files.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Precondition(_) => "precondition",
            Error::Usage(_) => "usage",
            Error::Dimension(_) => "dimension_mismatch",
            Error::NoInliers => "no_inliers",
            Error::DegenerateConfiguration(_) => "degenerate_configuration",
            Error::TooSparse(_) => "too_sparse",
            Error::Numerical(_) => "numerical",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }
}
