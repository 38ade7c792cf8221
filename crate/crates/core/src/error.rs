use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent with another one.
    #[error("configuration error: {0}")]
    Config(String),

    /// Shapes, names or other structural contracts between components disagree.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("dataset validation failed:\n{}", .0.join("\n"))]
    Dataset(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// The vision-language client failed; `retriable` marks transient failures.
    #[error("client error: {message}")]
    Client { message: String, retriable: bool },

    #[error("report pipeline failed for {item}: {source}")]
    Pipeline {
        item: String,
        #[source]
        source: Box<Error>,
    },

    #[error("could not parse score: {0}")]
    ScoreParse(String),

    #[error("template error: {0}")]
    Template(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    /// True for errors caused by bad user input (config, dataset layout, templates).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Dataset(_) | Error::Template(_) | Error::Json(_)
        )
    }
}
