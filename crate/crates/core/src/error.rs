use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed JSON: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("record {id}: field {field}: {message}")]
    Validation {
        id: String,
        field: &'static str,
        message: String,
    },

    #[error("record {id}: missing {what}")]
    Missing { id: String, what: String },

    #[error("AUROC undefined: {0}")]
    UndefinedAuroc(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(id: &str, field: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            id: id.to_string(),
            field,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
