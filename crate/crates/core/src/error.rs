use thiserror::Error;

use crate::denoiser::DenoiserModel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step {index} out of range 0..={max}")]
    Index { index: usize, max: usize },

    #[error("noise schedule: beta at t={t} is {beta}, outside (0, 1)")]
    Schedule { t: usize, beta: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("Langevin chain diverged at iteration {iteration} (|x|_inf = {norm:e})")]
    Diverged { iteration: usize, norm: f64 },

    /// Training produced a non-finite loss; `last_good` holds the parameters
    /// from the last completed optimizer step.
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss {
        step: usize,
        last_good: Box<DenoiserModel>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures caused by numbers rather than by inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Degenerate(_)
                | Error::Diverged { .. }
                | Error::NonFiniteLoss { .. }
        )
    }
}
