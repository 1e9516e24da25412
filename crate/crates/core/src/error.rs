use thiserror::Error;

/// Errors raised by the simulation, estimation and training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An inconsistent or unsupported configuration value.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data with the wrong shape or outside the admissible domain.
    #[error("input error: {0}")]
    Input(String),
    /// A stored artifact that does not match the configuration it is used with.
    #[error("lineage mismatch: {0}")]
    Lineage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
