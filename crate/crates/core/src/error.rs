use thiserror::Error;

/// Errors raised by the selection library.
#[derive(Debug, Error)]
pub enum CovselError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("point violates class constraints: {0}")]
    Infeasible(String),

    #[error("value outside the domain of {what}: {detail}")]
    Domain { what: &'static str, detail: String },

    #[error("grid of {size} points exceeds the limit of {limit}")]
    GridTooLarge { size: f64, limit: f64 },

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("root finding failed: {0}")]
    RootFinding(String),

    #[error("too few probes: {found} landed inside the eta-ball, need {needed}")]
    TooFewProbes { found: usize, needed: usize },

    #[error("parse error in {field}: {detail}")]
    Parse { field: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CovselError {
    /// True for errors caused by malformed user input rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CovselError::InvalidSpec(_)
                | CovselError::InvalidArgument(_)
                | CovselError::Infeasible(_)
                | CovselError::Domain { .. }
                | CovselError::GridTooLarge { .. }
                | CovselError::Parse { .. }
                | CovselError::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CovselError>;
