use std::path::PathBuf;

/// Every failure surfaced by the library. [`Error::category`] gives the
/// single-word tag the CLI prints.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error in column `{column}`: {message}")]
    Format { column: String, message: String },
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Value(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("transport error from `{backend}` after {attempts} attempt(s): {message}")]
    Transport {
        backend: String,
        attempts: usize,
        message: String,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("prediction length {got} does not match horizon {expected}")]
    Length { expected: usize, got: usize },
    #[error("template error: {message}; last output: {last_output}")]
    Template { message: String, last_output: String },
    #[error("summary error for window {window_id}: {message}")]
    Summary { window_id: usize, message: String },
    #[error("temporal leakage: {0}")]
    Leakage(String),
    #[error("retrieval rank {rank} exceeds knowledge base size {size}")]
    Range { rank: usize, size: usize },
    #[error("incompatible artifact: {0}")]
    Compatibility(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("missing event outputs for windows {0:?}")]
    MissingEvents(Vec<usize>),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("missing artifact {path}; run `{command}` first")]
    Dependency { path: PathBuf, command: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Ordering(_) => "ordering",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Value(_) => "value",
            Error::Precondition(_) => "precondition",
            Error::Transport { .. } => "transport",
            Error::Parse(_) => "parse",
            Error::Length { .. } => "length",
            Error::Template { .. } => "template",
            Error::Summary { .. } => "summary",
            Error::Leakage(_) => "leakage",
            Error::Range { .. } => "range",
            Error::Compatibility(_) => "compatibility",
            Error::Integrity(_) => "integrity",
            Error::MissingEvents(_) => "missing-events",
            Error::Diverged(_) => "diverged",
            Error::Dependency { .. } => "dependency",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
