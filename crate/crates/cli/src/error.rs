use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configs or input files.
    #[error("{0}")]
    Input(String),

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Divergence or another numerical breakdown.
    #[error("{0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] semshape::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use semshape::Error as E;
        match self {
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Core(E::Numerical(_) | E::NoInliers | E::DegenerateConfiguration(_)) => {
                EXIT_NUMERICAL
            }
            _ => EXIT_INPUT,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
