use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Each variant maps onto one of the stable CLI exit codes via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("calibration failure: {0}")]
    Calibration(String),

    #[error("undefined selective risk: {0}")]
    UndefinedRisk(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Exit codes: 1 check failure, 2 config error, 3 numeric fault.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::UndefinedRisk(_) | Error::Calibration(_) | Error::Degenerate(_) => 1,
            Error::Config(_)
            | Error::Protocol(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_) => 2,
        }
    }
}
