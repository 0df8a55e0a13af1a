//! Sharpness-aware robust unlearning on a synthetic hallucinating captioner.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the experiment pipeline uses.

pub mod attacks;
pub mod autodiff;
pub mod metrics;
pub mod numcheck;
pub mod objectives;
mod scalar;
pub mod synthworld;
pub mod toymodel;
pub mod tsam;

pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamVector = autodiff::ParamVector<f64>;

pub type CaptionModel = toymodel::CaptionModel<f64>;
pub type AdamW = tsam::AdamW<f64>;
pub type LossReport = objectives::LossReport<f64>;
pub type LossWeights = objectives::LossWeights<f64>;
