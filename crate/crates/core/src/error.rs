//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A physical or scaled parameter violates its domain invariant.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An argument to an operation is out of range or malformed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Vector or matrix dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The explicit scheme's stability bound is violated for the requested
    /// time step.
    #[error("unstable configuration: max modal frequency {omega_max:.3} rad/s >= limit 2/k = {limit:.3} rad/s")]
    Unstable { omega_max: f64, limit: f64 },

    /// A non-finite state component was produced while stepping.
    #[error("solver diverged at step {step}")]
    Diverged { step: usize },

    /// A relative metric was requested against a zero-energy target.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A binary or text container is corrupt or has the wrong magic/version.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset contents do not match their manifest.
    #[error("dataset integrity: {0}")]
    Integrity(String),

    /// A trajectory file listed in the manifest is absent.
    #[error("missing trajectory file: {0}")]
    MissingTrajectory(String),

    /// The training loop could not make progress.
    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
