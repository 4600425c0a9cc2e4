use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A resource the caller must populate first (e.g. an empty target buffer).
    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// The optimizer refused an update because gradients were non-finite.
    #[error("update rejected: {0}")]
    UpdateRejected(String),

    #[error("trace is not usable for fine-tuning: {0}")]
    InvalidForFinetuning(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn config_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}
