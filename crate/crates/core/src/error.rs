use thiserror::Error;

/// Errors raised by model construction, integration and the checks built on them.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("operation `{op}` requires a {expected} model, got family `{family}`")]
    WrongFamily {
        op: &'static str,
        expected: &'static str,
        family: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unsupported integration method: {0}")]
    UnsupportedMethod(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("identification failure: {0}")]
    Identification(String),

    #[error("singular local fit at x0 = {x0:?}")]
    SingularFit { x0: Vec<f64> },

    #[error("insufficient data near x0 = {x0:?}: {effective} observations within two bandwidths, need {required}")]
    InsufficientData {
        x0: Vec<f64>,
        effective: usize,
        required: usize,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
