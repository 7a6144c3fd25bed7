use std::path::{Path, PathBuf};

/// Errors from file IO, parsing and the CLI, plus wrapped core errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint {path} has format version {found}, this build reads version {expected}")]
    Incompatible { path: PathBuf, found: u32, expected: u32 },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{0} is locked by another run")]
    Locked(PathBuf),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] zeroddi_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.as_ref().to_path_buf(), msg: msg.into() }
    }

    /// Short machine-readable category printed with CLI failures.
    pub fn category(&self) -> &'static str {
        use zeroddi_core::Error as C;
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } | Error::Format { .. } => "format",
            Error::Incompatible { .. } => "incompatible",
            Error::Config { .. } => "config",
            Error::Locked(_) => "locked",
            Error::GradCheck(_) => "gradcheck",
            Error::Usage(_) => "usage",
            Error::Core(e) => match e {
                C::Validation(_) | C::Vocabulary { .. } | C::EmptyDataset(_) => "validation",
                C::Argument(_) => "usage",
                C::Diverged(_) | C::NonFinite(_) => "diverged",
                C::Shape { .. } | C::Contract(_) => "internal",
            },
        }
    }

    /// Process exit code: 2 for usage errors, 3 for invalid inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "validation" | "format" | "incompatible" | "config" => 3,
            _ => 1,
        }
    }
}
