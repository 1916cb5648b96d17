use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("missing artifact {path} (produced by the `{stage}` stage)")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line harness:
    /// 1 usage/config, 2 data, 3 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_)
            | Error::Config(_)
            | Error::MissingArtifact { .. }
            | Error::Refused(_)
            | Error::Precondition(_) => 1,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Corruption(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::Dimension(_) | Error::Domain(_) | Error::Invariant(_) => 3,
        }
    }
}
