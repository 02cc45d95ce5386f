use thiserror::Error;

/// Errors surfaced by every module. The CLI maps these onto exit codes:
/// config/validation -> 1, numeric/runtime -> 2, I/O and format -> 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate vector: zero norm in {0}")]
    DegenerateVector(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("index {index} out of range (len {len}) in {context}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes for {what}, found {found}")]
    Truncated {
        what: String,
        expected: u64,
        found: u64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code class for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::ShapeMismatch { .. }
            | Error::Numeric(_)
            | Error::DegenerateVector(_)
            | Error::IndexOutOfRange { .. } => 2,
            Error::Format(_) | Error::Truncated { .. } | Error::Io(_) | Error::Json(_) => 3,
        }
    }
}
