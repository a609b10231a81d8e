use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric input error: {0}")]
    NumericInput(String),

    #[error("splice error: parameter `{name}`: {reason}")]
    Splice { name: String, reason: String },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("integrity error: {}: {reason}", path.display())]
    Integrity { path: PathBuf, reason: String },

    #[error("i/o error: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Process exit status used by the command-line front end.
    ///
    /// 2 = configuration, 3 = data, 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Splice { .. } => 2,
            Error::Integrity { .. } | Error::Io { .. } | Error::Format(_) => 3,
            Error::Dimension(_)
            | Error::Domain(_)
            | Error::NumericInput(_)
            | Error::Degenerate(_)
            | Error::Range(_) => 4,
        }
    }

    /// Short machine-parsable tag, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::NumericInput(_) => "numeric_input",
            Error::Splice { .. } => "splice",
            Error::Contract(_) => "contract",
            Error::Degenerate(_) => "degenerate",
            Error::Range(_) => "range",
            Error::Integrity { .. } => "integrity",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }
}
