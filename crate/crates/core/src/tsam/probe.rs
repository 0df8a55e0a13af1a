use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::step::{compute_epsilon_star, DEFAULT_DELTA_GRAD};
use super::TsamError;
use crate::autodiff::ParamVector;
use crate::objectives::{ModelObjective, Objective};
use crate::synthworld::{Scene, UnlearnUnit};
use crate::toymodel::{CaptionModel, TrainableSet};
use crate::Scalar;

/// Loss increases `L(θ+δ) − L(θ)` over perturbations with `‖δ‖₂ = ρ`. Each
/// random direction is probed with both signs, so first-order terms cancel
/// in the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub rho: f64,
    pub n_dirs: usize,
    pub base_loss: f64,
    pub mean_increase: f64,
    pub max_increase: f64,
    /// Increase along the normalized gradient (the ε* direction).
    pub worst_case_increase: f64,
}

pub fn sharpness_probe<T: Scalar>(
    objective: &dyn Objective<T>,
    theta: &ParamVector<T>,
    rho: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<SharpnessReport, TsamError> {
    if n_dirs == 0 {
        return Err(TsamError::Config("sharpness probe needs at least one direction".into()));
    }
    let (base, grad) = objective.value_and_grad(theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut increases = Vec::with_capacity(2 * n_dirs);
    for _ in 0..n_dirs {
        let dir: Vec<T> = (0..theta.len()).map(|_| T::of(StandardNormal.sample(&mut rng))).collect();
        let dir = ParamVector::new(dir);
        let delta = dir.scaled(T::of(rho) / dir.l2_norm());
        for probe in [theta.add(&delta), theta.sub(&delta)] {
            increases.push((objective.value(&probe)? - base).to_f64_lossy());
        }
    }
    let worst_case_increase = if rho > 0.0 {
        let eps = compute_epsilon_star(&grad, T::of(rho), T::of(DEFAULT_DELTA_GRAD))?;
        (objective.value(&theta.add(&eps.eps))? - base).to_f64_lossy()
    } else {
        0.0
    };
    Ok(SharpnessReport {
        rho,
        n_dirs,
        base_loss: base.to_f64_lossy(),
        mean_increase: increases.iter().sum::<f64>() / increases.len() as f64,
        max_increase: increases.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        worst_case_increase,
    })
}

/// [`sharpness_probe`] of `L_neg` over the mapping layer of `model`. The model
/// is only read; perturbed weights never leave the loss evaluation.
pub fn neg_sharpness_probe<T: Scalar>(
    model: &CaptionModel<T>,
    scenes: &[Scene],
    units: &[&UnlearnUnit],
    rho: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<SharpnessReport, TsamError> {
    let set = TrainableSet::mapping();
    let objective = ModelObjective::negative(model, set.clone(), scenes, units)?;
    sharpness_probe(&objective, &model.trainable_vector(&set), rho, n_dirs, seed)
}
