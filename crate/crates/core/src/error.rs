use std::path::PathBuf;

/// Errors raised across the engine. Each variant corresponds to one failure
/// class named by the operation contracts (shape, range, format, ...).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("load error: parameter `{name}`: {reason}")]
    Load { name: String, reason: String },

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("harness error: {0}")]
    Harness(String),

    #[error("ingestion error at line {line}: {reason}")]
    Ingest { line: usize, reason: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("join error: {0}")]
    Join(String),

    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable name of the failure class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Range(_) => "range",
            Error::Param(_) => "parameter",
            Error::Numeric(_) => "numeric",
            Error::Oracle(_) => "oracle",
            Error::Format(_) => "format",
            Error::Load { .. } => "load",
            Error::DegenerateStats(_) => "degenerate-stats",
            Error::Harness(_) => "harness",
            Error::Ingest { .. } => "ingest",
            Error::Split(_) => "split",
            Error::Metric(_) => "metric",
            Error::Training(_) => "training",
            Error::Join(_) => "join",
            Error::Image { .. } => "image",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
