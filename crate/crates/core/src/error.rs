use alloc::string::String;

/// Errors raised by the numeric core, the model, and the dataset utilities.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("unknown atom code {code} (vocabulary size {vocab})")]
    Vocabulary { code: usize, vocab: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
