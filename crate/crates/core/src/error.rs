use std::path::PathBuf;

/// Errors raised across the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input did not satisfy an operation's preconditions (shape, range, emptiness).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// An intervention plan referenced something the model does not have.
    #[error("rejected plan: {0}")]
    InvalidPlan(String),

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A labeled dataset cannot be used for the requested training.
    #[error("rejected dataset: {0}")]
    Dataset(String),

    #[error("training failed: {reason}")]
    TrainingFailed { reason: String, loss_trace: Vec<f32> },

    #[error("duplicate record: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),

    /// Command-line usage error (unknown flag, missing value).
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Stable machine-readable kind, used by the CLI and HTTP error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::TrainingFailed { .. } => "training_failed",
            Error::Conflict(_) => "conflict",
            Error::NotFound(_) => "not_found",
            Error::Archive(_) => "archive",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Png(_) => "png",
            Error::Usage(_) => "usage",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
