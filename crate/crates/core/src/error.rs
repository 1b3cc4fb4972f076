use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("id {id} out of range for a table with {rows} rows")]
    Range { id: usize, rows: usize },

    #[error("{op} would produce an empty output: {detail}")]
    EmptyOutput { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid UTF-8 input at byte offset {0}")]
    InvalidUtf8(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension {
        op,
        detail: detail.into(),
    })
}
