use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("void schedule infeasible: {0}")]
    ScheduleInfeasible(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("degenerate histogram: {0}")]
    DegenerateHistogram(String),

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("registration error: {0}")]
    Registration(String),

    #[error("alignment failure: {0}")]
    AlignmentFailure(String),

    #[error("unknown printer profile `{0}`")]
    UnknownProfile(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("ingest error in {}: {reason}", path.display())]
    Ingest { path: PathBuf, reason: String },

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed (manifest: {}): {source}", manifest.display())]
    Stage {
        stage: &'static str,
        manifest: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format { path: path.into(), reason: reason.to_string() }
    }

    /// Broad failure class, used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Config(_) | Error::UnknownProfile(_) | Error::Format { .. } => ErrorClass::Config,
            Error::Stage { source, .. } => match source.class() {
                ErrorClass::Io => ErrorClass::Io,
                _ => ErrorClass::Stage,
            },
            _ => ErrorClass::Stage,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Stage,
    Io,
}
