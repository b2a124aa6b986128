use thiserror::Error;

/// Errors raised across the toolkit.
///
/// The variants map onto the CLI exit codes: configuration problems, data
/// problems and numeric aborts are distinguished so callers can react to
/// each differently.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
