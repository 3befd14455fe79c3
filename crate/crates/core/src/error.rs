use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("step {step} outside valid range [{min}, {max}]")]
    StepRange { step: usize, min: usize, max: usize },

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cannot normalize a zero vector")]
    Normalization,

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite values at stage `{stage}`{}", step.map(|t| format!(" (t={t})")).unwrap_or_default())]
    Numeric { stage: String, step: Option<usize> },

    #[error("identity lookup failed: {0}")]
    Lookup(String),

    #[error("enrollment rejected: {0}")]
    Enrollment(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(stage: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            step: None,
        }
    }

    /// Process exit code for the command line: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Contract(_)
            | Error::StepRange { .. }
            | Error::Lookup(_)
            | Error::Enrollment(_) => 1,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Split(_)
            | Error::Input(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Dimension { .. } => 2,
            Error::Numeric { .. } | Error::Singularity(_) | Error::Normalization => 3,
        }
    }

    /// Short machine-parsable tag used on the diagnostic stream.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::StepRange { .. } => "step-range",
            Error::Singularity(_) => "singularity",
            Error::Contract(_) => "contract",
            Error::Normalization => "normalization",
            Error::Input(_) => "input",
            Error::Numeric { .. } => "numeric",
            Error::Lookup(_) => "lookup",
            Error::Enrollment(_) => "enrollment",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Split(_) => "split",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}
