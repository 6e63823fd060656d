use thiserror::Error;

use crate::numcore::NumError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("routing error: no adapter for language {language} at site {site}")]
    Routing { site: String, language: String },
    #[error("plan error: {0}")]
    Plan(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
