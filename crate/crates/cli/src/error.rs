use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] msdformer::Error),

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing {what} at {}; run `{command}` first", path.display())]
    MissingDependency {
        what: &'static str,
        path: PathBuf,
        command: &'static str,
    },

    #[error("unknown preset `{0}`; available: {1}")]
    UnknownPreset(String, String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("self-test failed: {0}")]
    SelfTest(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
