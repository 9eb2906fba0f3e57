use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report. The variants map one-to-one onto
/// the CLI exit codes and the FFI status codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("method unavailable: {0}")]
    MethodUnavailable(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for data/integrity problems, 3 for configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            _ => 2,
        }
    }

    /// Short stable name of the error kind, used in reports and across the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Data(_) => "data",
            Error::Schema(_) => "schema",
            Error::NotFound(_) => "not-found",
            Error::Integrity(_) => "integrity",
            Error::Config(_) => "config",
            Error::Selection(_) => "selection",
            Error::Training(_) => "training",
            Error::Metric(_) => "metric",
            Error::MethodUnavailable(_) => "method-unavailable",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
