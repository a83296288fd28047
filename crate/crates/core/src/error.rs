use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// config/format problems exit 2, budget violations exit 3, everything else 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown task {0}")]
    MissingTask(usize),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// LRP hit a zero pre-activation with nonzero incoming relevance and no
    /// epsilon stabilizer to absorb it.
    #[error("singular relevance propagation at backbone layer {layer}")]
    SingularPropagation { layer: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("memory budget violation: {0}")]
    BudgetViolation(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("consistency check failed: {0}")]
    Consistency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
