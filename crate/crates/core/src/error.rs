use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped so the command line can map them onto exit codes:
/// [`Error::Domain`] and [`Error::Config`] are caller mistakes, [`Error::Data`]
/// and friends point at an input file, everything else is a runtime failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    DataLine { path: String, line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("missing covariate `{0}`")]
    MissingCovariate(&'static str),

    #[error("unknown category {value} for `{field}`")]
    UnknownCategory { field: String, value: i64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("schema mismatch: artifact has {found}, runtime expects {expected}")]
    SchemaMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::DataLine { .. }
                | Error::Data(_)
                | Error::MissingCovariate(_)
                | Error::UnknownCategory { .. }
                | Error::SchemaMismatch { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }

    /// True for errors caused by invalid arguments or configuration.
    pub fn is_usage_error(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Config(_))
    }
}
