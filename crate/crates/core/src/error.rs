use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read volume {path}: {message}")]
    Volume { path: PathBuf, message: String },

    #[error("unknown label codes present: {codes:?}")]
    UnknownLabelCodes { codes: Vec<u32> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wrong map role: expected {expected}, found {found}")]
    WrongRole { expected: String, found: String },

    #[error("model variant `{variant}` has no {head} head")]
    MissingHead { variant: String, head: &'static str },

    #[error("model variant `{variant}` needs {what} targets")]
    MissingTarget { variant: String, what: &'static str },

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("non-finite loss at step {step} (case {case_id}): {breakdown}")]
    NonFiniteLoss {
        step: usize,
        case_id: String,
        breakdown: String,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn volume(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Volume {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
