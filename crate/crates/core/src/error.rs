use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no closed form for depth {0}; integrate the flow instead")]
    UnsupportedDepth(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("step size underflow at t = {time}")]
    StepUnderflow { time: f64 },

    #[error("integration exceeded {steps} steps before t = {time}")]
    StepLimit { steps: usize, time: f64 },

    #[error("bracket [{lo}, {hi}] does not bracket the threshold: {reason}")]
    NotBracketing { lo: f64, hi: f64, reason: String },

    #[error("incremental property flips {flips} times on the scan grid; threshold is not monotone in the init scale")]
    NonMonotone { flips: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("learning rate too large: update base {base} < 0 at coordinate {index}")]
    RateTooLarge { index: usize, base: f64 },

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("loss increased during the pilot window at step {step} (eta = {eta}); try eta = {suggested}")]
    PilotFailed { step: usize, eta: f64, suggested: f64 },

    #[error("no convergence within {steps} steps")]
    NoConvergence { steps: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
