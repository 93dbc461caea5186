use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("{what} index {index} out of range (size {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("synthesis failed: {reason}")]
    Synthesis {
        reason: String,
        /// Last relative residual observed, when the failure came out of an iterative solve.
        residual: Option<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("node {node} has no data for in-neighbor {missing}")]
    LocalityViolation { node: usize, missing: usize },

    #[error("integration diverged at t = {time}: state component {component} = {value}")]
    Divergence {
        time: f64,
        component: usize,
        value: f64,
    },

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn synthesis(reason: impl Into<String>) -> Self {
        Error::Synthesis {
            reason: reason.into(),
            residual: None,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::ConfigParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
