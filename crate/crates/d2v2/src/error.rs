//! Error taxonomy. The CLI maps each class to a distinct exit code so
//! scripts can tell a bad config from a bad dataset from a numeric blowup.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum D2v2Error {
    /// Invalid configuration (bad field values, incompatible shapes chosen
    /// in configs, unknown keys, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset / file-format / IO problems.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or other numeric faults during compute.
    #[error("numeric fault: {0}")]
    Numeric(String),
}

impl D2v2Error {
    pub fn config(msg: impl Into<String>) -> Self {
        D2v2Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        D2v2Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        D2v2Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            D2v2Error::Config(_) => 2,
            D2v2Error::Data(_) => 3,
            D2v2Error::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for D2v2Error {
    fn from(e: std::io::Error) -> Self {
        D2v2Error::Data(format!("io: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, D2v2Error>;
