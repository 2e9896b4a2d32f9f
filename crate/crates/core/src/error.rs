use std::path::PathBuf;

/// Errors produced by the toolkit.
///
/// Variants are grouped by the stage that raised them so the CLI can map
/// them onto exit codes (data problems vs. numeric failures).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("JPEG recompression failed: {0}")]
    Recompress(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("backbone load failed: {0}")]
    BackboneLoad(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl ToString) -> Self {
        Error::Format {
            what,
            reason: reason.to_string(),
        }
    }

    /// True for failures of the numerical machinery itself rather than of
    /// the inputs handed to it.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Training(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
