use std::path::PathBuf;

/// Errors raised by the forecasting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A documented precondition of an operation was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("integration failed at t={t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("sampling failed at step {step}: {reason}")]
    Sampling { step: usize, reason: String },

    #[error("non-finite activation in {location}")]
    NonFiniteActivation { location: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (diffusion steps {steps:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        steps: Vec<usize>,
    },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

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

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Integration { .. }
            | Error::Sampling { .. }
            | Error::NonFiniteActivation { .. }
            | Error::NonFiniteLoss { .. }
            | Error::Degenerate(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
