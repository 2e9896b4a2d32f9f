use std::path::PathBuf;

/// A request the study refuses. Each maps to a stable reason code.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Rejection {
    #[error("study is full: {remaining} unassigned images, {needed} needed")]
    StudyFull { remaining: usize, needed: usize },
    #[error("unknown study {0}")]
    UnknownStudy(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown image {0}")]
    UnknownImage(u64),
    #[error("image {image_id} is not assigned to session {session_id}")]
    WrongImage { session_id: String, image_id: u64 },
    #[error("image {image_id} was already answered in session {session_id}")]
    Duplicate { session_id: String, image_id: u64 },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("missing or wrong admin token")]
    Unauthorized,
    #[error("export is disabled: no admin token configured")]
    ExportDisabled,
    #[error("the study has no annotations yet")]
    EmptyStudy,
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::StudyFull { .. } => "study_full",
            Rejection::UnknownStudy(_) => "unknown_study",
            Rejection::UnknownSession(_) => "unknown_session",
            Rejection::UnknownImage(_) => "unknown_image",
            Rejection::WrongImage { .. } => "wrong_image",
            Rejection::Duplicate { .. } => "duplicate",
            Rejection::InvalidBox(_) => "invalid_box",
            Rejection::BadRequest(_) => "bad_request",
            Rejection::Unauthorized => "unauthorized",
            Rejection::ExportDisabled => "export_disabled",
            Rejection::EmptyStudy => "empty_study",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error(transparent)]
    Rejected(#[from] Rejection),
    #[error("store i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("study configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] mcfuse::Error),
}

impl StudyError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StudyError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn rejection(&self) -> Option<&Rejection> {
        match self {
            StudyError::Rejected(r) => Some(r),
            _ => None,
        }
    }
}
