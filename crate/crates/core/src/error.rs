use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is invalid. `field` names the offending key.
    #[error("invalid configuration: `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in loss term `{term}` at iteration {iter}")]
    NonFinite { term: String, iter: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed record in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// A TOML parse failure, attributed to the key on the offending line, or
    /// to `whole` when the error spans the document.
    pub fn toml(text: &str, err: &toml::de::Error, whole: &str) -> Self {
        let missing = err
            .message()
            .strip_prefix("missing field `")
            .and_then(|m| m.split('`').next());
        if let Some(name) = missing {
            return Error::config(name, err.message().to_string());
        }
        let field = err
            .span()
            .filter(|s| !s.is_empty() && !text.get(s.clone()).unwrap_or("").contains('\n'))
            .and_then(|s| {
                let start = text[..s.start].rfind('\n').map_or(0, |k| k + 1);
                let line = text[start..].lines().next()?;
                line.split_once('=').map(|(key, _)| key.trim().to_string())
            })
            .filter(|k| !k.is_empty())
            .unwrap_or_else(|| whole.to_string());
        Error::config(field, err.message().to_string())
    }

    /// Usage/configuration problems exit with 2, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            _ => 1,
        }
    }
}
