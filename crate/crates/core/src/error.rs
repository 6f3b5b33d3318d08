use std::path::PathBuf;

use crate::factors::StateId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is within 1e-6 of pi; logarithm branch is ambiguous")]
    AngleNearPi { angle: f64 },

    #[error("query time {t} s lies outside the interval [{start}, {end}] s")]
    OutOfInterval { t: f64, start: f64, end: f64 },

    #[error("observation at {t} s lies outside the trajectory span [{start}, {end}] s")]
    ObservationOutOfSpan { t: f64, start: f64, end: f64 },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("error covariance is not positive definite ({0})")]
    SingularWeight(&'static str),

    #[error("time increment must be positive, got {0} s")]
    NonpositiveDt(f64),

    #[error("state {0:?} is not part of the ordering")]
    UnknownStateId(StateId),

    #[error("normal matrix is not positive definite; the problem has an unresolved rank deficiency")]
    IndefiniteSystem,

    #[error("update has {got} entries but the state ordering needs {expected}")]
    BlockMismatch { expected: usize, got: usize },

    #[error("cost increased on {0} consecutive damping escalations")]
    DivergenceDetected(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("infeasible scenario spec: {0}")]
    InfeasibleSpec(String),

    #[error("point disparity needs at least two non-empty submaps")]
    TooFewSubmaps,

    #[error("disparity report is empty")]
    EmptyReport,

    #[error("{}: field `{field}`: {reason}", path.display())]
    SchemaViolation {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("{}: rotation at `{field}` deviates from SO(3) by {deviation:.3e}", path.display())]
    NonOrthonormalRotation {
        path: PathBuf,
        field: String,
        deviation: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
