use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient markers: need at least {needed}, found {found}")]
    InsufficientMarkers { needed: usize, found: usize },

    #[error("insufficient matches: need at least {needed}, found {found}")]
    InsufficientMatches { needed: usize, found: usize },

    #[error("infeasible matching: {0}")]
    Infeasible(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cannot proceed: {0}")]
    CannotProceed(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Parse,
    Degenerate,
    Infeasible,
    Other,
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. } | Error::Config(_) => ErrorKind::Parse,
            Error::InvalidTransform(_)
            | Error::DegenerateLandmarks(_)
            | Error::DegenerateGeometry(_)
            | Error::InsufficientMarkers { .. }
            | Error::InsufficientMatches { .. }
            | Error::CannotProceed(_) => ErrorKind::Degenerate,
            Error::Infeasible(_) => ErrorKind::Infeasible,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Other,
        }
    }

    /// Process exit code: 0 success, 2 parse, 3 degenerate geometry, 4 infeasible, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Parse => 2,
            ErrorKind::Degenerate => 3,
            ErrorKind::Infeasible => 4,
            ErrorKind::Other => 1,
        }
    }
}
