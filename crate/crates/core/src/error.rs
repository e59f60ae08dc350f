use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("operator produced a non-finite value")]
    NonFiniteOperator,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("model parameters are not finite")]
    CorruptModel,

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("time {t} outside [{eps}, {t_end}]")]
    TimeRange { t: f64, eps: f64, t_end: f64 },

    #[error("schedule is singular at t = {0}")]
    SingularTime(f64),

    #[error("vector field is not finite at t = {t} (x = {x:?})")]
    NonFiniteField { x: Vec<f64>, t: f64 },

    #[error("covariance is not symmetric positive definite")]
    InvalidCovariance,

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("step size underflow at t = {t} (h = {h:e}) after {steps} accepted steps")]
    Stiffness {
        t: f64,
        h: f64,
        steps: usize,
        /// Accepted (t, state) pairs up to the failure.
        trajectory: Vec<(f64, Vec<f64>)>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
