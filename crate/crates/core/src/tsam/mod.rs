//! Targeted-SAM unlearning, the baseline and gradient-ascent comparators,
//! and the training loops built on them.

mod adamw;
mod finetune;
mod probe;
mod run;
mod step;

pub use adamw::{AdamW, AdamWConfig};
pub use finetune::{fit, FitConfig};
pub use probe::{neg_sharpness_probe, sharpness_probe, SharpnessReport};
pub use run::{epoch_batches, method_gradient, unlearn_run, Method, RunLog, StepRecord, UnlearnConfig};
pub use step::{compute_epsilon_star, tsam_gradient, tsam_step, EpsilonStar, StepObjectives, StepOutcome, TsamStepTrace, DEFAULT_DELTA_GRAD};

use thiserror::Error;

use crate::objectives::ObjectiveError;
use crate::toymodel::ModelError;

#[derive(Debug, Error)]
pub enum TsamError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("perturbation radius must be positive, got {0}")]
    Radius(f64),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("diverged at step {step}: L_pos {l_pos} exceeds limit relative to initial {initial}")]
    Diverged { step: usize, l_pos: f64, initial: f64 },
    #[error("{0}")]
    Config(String),
}

#[cfg(test)]
mod tests;
