use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A hyperparameter or configuration value violates a precondition.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    /// Input data failed validation (ingestion, sequence invariants).
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke an operation's contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN or infinity surfaced while evaluating a computation record.
    #[error("non-finite value at node {node} ({op}) during {phase}")]
    NonFinite {
        node: usize,
        op: &'static str,
        phase: &'static str,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
