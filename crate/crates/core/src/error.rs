use std::path::PathBuf;

use crate::language::Language;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),

    #[error("corpus is missing languages: {}", .0.iter().map(|l| l.code()).collect::<Vec<_>>().join(", "))]
    MissingLanguages(Vec<Language>),

    #[error("{}:{line}: {message}", .path.display())]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("model fingerprint mismatch: bank is bound to {expected}, model is {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("non-finite loss at epoch {epoch}, language {language}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        language: Language,
        step: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn format_err(kind: &'static str, message: impl Into<String>) -> Error {
    Error::Format {
        kind,
        message: message.into(),
    }
}
