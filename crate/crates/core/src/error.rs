use thiserror::Error;

/// Errors raised by the numerical pipeline.
///
/// The variants line up with the CLI exit codes: configuration and input
/// problems are the caller's fault, numerical and partial failures are not.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure in realization {index} (seed {seed:#018x}): {message}")]
    Numerical {
        index: u64,
        seed: u64,
        message: String,
    },

    #[error("{} work unit(s) failed (indices {failed:?}); first error: {first}", failed.len())]
    Partial { failed: Vec<u64>, first: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in `--json` error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Input(_) => "input",
            Error::Domain(_) => "domain",
            Error::Numerical { .. } => "numerical",
            Error::Partial { .. } => "partial",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
