use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error in `{field}`: {detail}")]
    Parse { field: String, detail: String },

    #[error("problem is not closed-loop solvable: {0}")]
    NotClosedLoopSolvable(String),

    #[error("problem is not open-loop solvable: {0}")]
    NotOpenLoopSolvable(String),

    #[error("regularized control weight is numerically singular at t={t} (condition {condition:e})")]
    IllConditioned { t: usize, condition: f64 },

    #[error("instance too large: {size} exceeds cap {cap}")]
    InstanceTooLarge { size: usize, cap: usize },

    #[error("convergence failure: {0}")]
    ConvergenceFailure(String),

    #[error("weak closed-loop window too long: gain diverges at t={step}")]
    WindowTooLong { step: usize },

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// I/O error prefixed with the offending path.
    pub(crate) fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub(crate) fn parse(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
