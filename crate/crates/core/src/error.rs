use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement; `axis` names the offending axis or operand.
    #[error("dimension mismatch on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    /// Corrupt or truncated serialized state; `key` is the block being read.
    #[error("integrity error at `{key}`: {detail}")]
    Integrity { key: String, detail: String },

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(axis: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Dimension {
        axis: axis.into(),
        detail: detail.into(),
    }
}
