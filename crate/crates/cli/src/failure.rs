use std::process::ExitCode;

use mcfuse_psycho::StudyError;

/// A command failure, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration (exit 1).
    Usage(String),
    /// Missing, malformed or inconsistent data (exit 2).
    Data(String),
    /// The numerics failed (exit 3).
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        })
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<mcfuse::Error> for Failure {
    fn from(e: mcfuse::Error) -> Self {
        let msg = e.to_string();
        match e {
            mcfuse::Error::Config(_) => Failure::Usage(msg),
            e if e.is_numeric() => Failure::Numeric(msg),
            _ => Failure::Data(msg),
        }
    }
}

impl From<StudyError> for Failure {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Config(m) => Failure::Usage(m),
            StudyError::Data(e) => e.into(),
            e => Failure::Data(e.to_string()),
        }
    }
}

pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

pub type CmdResult<T = ()> = Result<T, Failure>;
