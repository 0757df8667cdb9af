use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("validation failed for `{subject}`: {detail}")]
    Validation { subject: String, detail: String },

    #[error("shape mismatch at {site}: expected {expected}, got {got}")]
    Shape {
        site: String,
        expected: String,
        got: String,
    },

    #[error("unknown reference `{0}`")]
    UnknownRef(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn validation(subject: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation {
            subject: subject.into(),
            detail: detail.into(),
        }
    }

    pub fn shape(site: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            site: site.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
