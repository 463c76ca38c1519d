use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or policy parameter is outside its valid domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Caller-supplied data is malformed (empty histogram, wrong dimension, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A run configuration failed validation before anything executed.
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("numeric failure in {what}: {detail}")]
    Numeric { what: &'static str, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("normalization failed: {0}")]
    Normalization(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("worker failure: {0}")]
    Worker(String),

    /// A run stopped before completing; the trace up to that point is attached.
    #[error("run aborted: {diagnostic}")]
    Aborted { diagnostic: String, partial: Option<Box<crate::engine::RunTrace>> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors that stem from bad caller input rather than from a
    /// failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_)
                | Error::Input(_)
                | Error::Validation(_)
                | Error::Unsupported(_)
                | Error::Precondition(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Input(_) => "input",
            Error::Validation(_) => "validation",
            Error::Numeric { .. } => "numeric",
            Error::Unsupported(_) => "unsupported",
            Error::Normalization(_) => "normalization",
            Error::Precondition(_) => "precondition",
            Error::Estimation(_) => "estimation",
            Error::Worker(_) => "worker",
            Error::Aborted { .. } => "aborted",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
