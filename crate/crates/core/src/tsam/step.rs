use serde::{Deserialize, Serialize};

use super::{AdamW, TsamError};
use crate::autodiff::ParamVector;
use crate::objectives::{compose_report, LossReport, LossWeights, Objective};
use crate::Scalar;

/// Gradient norms below this skip the perturbation.
pub const DEFAULT_DELTA_GRAD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonStar<T> {
    pub eps: ParamVector<T>,
    /// The gradient was below `δ_grad`; `eps` is zero.
    pub degenerate: bool,
}

/// First-order worst-case perturbation `ε* = ρ·g/‖g‖₂` of radius `rho`.
pub fn compute_epsilon_star<T: Scalar>(grad: &ParamVector<T>, rho: T, delta_grad: T) -> Result<EpsilonStar<T>, TsamError> {
    if !(rho > T::zero()) || !rho.is_finite() {
        return Err(TsamError::Radius(rho.to_f64_lossy()));
    }
    let norm = grad.l2_norm();
    if !norm.is_finite() {
        return Err(TsamError::NonFinite("gradient at θ".into()));
    }
    if norm < delta_grad {
        return Ok(EpsilonStar { eps: ParamVector::zeros(grad.len()), degenerate: true });
    }
    Ok(EpsilonStar { eps: grad.scaled(rho / norm), degenerate: false })
}

/// Diagnostics for one Targeted-SAM step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsamStepTrace<T> {
    pub neg_grad_norm: T,
    pub eps_norm: T,
    pub eps_cosine: T,
    pub neg_perturbed_grad_norm: T,
    pub pos_grad_norm: T,
    pub sent_grad_norm: T,
    pub final_grad_norm: T,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome<T> {
    pub report: LossReport<T>,
    pub trace: Option<TsamStepTrace<T>>,
    pub g_final: ParamVector<T>,
}

/// The three loss terms of one step as functions of θ_φ.
pub struct StepObjectives<'o, T> {
    pub neg: &'o dyn Objective<T>,
    pub pos: Option<&'o dyn Objective<T>>,
    pub sent: Option<&'o dyn Objective<T>>,
}

fn finite<T: Scalar>(what: &str, g: &ParamVector<T>) -> Result<(), TsamError> {
    if g.all_finite() {
        Ok(())
    } else {
        Err(TsamError::NonFinite(what.to_string()))
    }
}

/// Targeted-SAM aggregated gradient:
/// `g_final = λ1·∇L_neg(θ+ε*) + ∇L_pos(θ) + λ2·∇L_sent(θ)` with
/// `ε* = ρ·∇L_neg(θ)/‖∇L_neg(θ)‖`. With `ρ = 0` no perturbation is made.
pub fn tsam_gradient<T: Scalar>(
    theta: &ParamVector<T>,
    objectives: &StepObjectives<'_, T>,
    weights: &LossWeights<T>,
    delta_grad: T,
) -> Result<StepOutcome<T>, TsamError> {
    let (l_neg, g_neg) = objectives.neg.value_and_grad(theta)?;
    finite("∇L_neg(θ)", &g_neg)?;
    let (eps, degenerate) = if weights.rho > T::zero() {
        let e = compute_epsilon_star(&g_neg, weights.rho, delta_grad)?;
        (e.eps, e.degenerate)
    } else {
        (ParamVector::zeros(theta.len()), false)
    };
    let g_neg_perturbed = if degenerate || weights.rho == T::zero() {
        g_neg.clone()
    } else {
        let perturbed = theta.add(&eps);
        let (_, g) = objectives.neg.value_and_grad(&perturbed)?;
        finite("∇L_neg(θ+ε*)", &g)?;
        g
    };
    let (l_pos, g_pos) = match objectives.pos {
        Some(o) => o.value_and_grad(theta)?,
        None => (T::zero(), ParamVector::zeros(theta.len())),
    };
    let (l_sent, g_sent) = match objectives.sent {
        Some(o) => o.value_and_grad(theta)?,
        None => (T::zero(), ParamVector::zeros(theta.len())),
    };
    finite("∇L_pos(θ)", &g_pos)?;
    finite("∇L_sent(θ)", &g_sent)?;
    let mut g_final = g_neg_perturbed.scaled(weights.lambda1);
    g_final.axpy(T::one(), &g_pos);
    g_final.axpy(weights.lambda2, &g_sent);
    let trace = TsamStepTrace {
        neg_grad_norm: g_neg.l2_norm(),
        eps_norm: eps.l2_norm(),
        eps_cosine: eps.cosine(&g_neg),
        neg_perturbed_grad_norm: g_neg_perturbed.l2_norm(),
        pos_grad_norm: g_pos.l2_norm(),
        sent_grad_norm: g_sent.l2_norm(),
        final_grad_norm: g_final.l2_norm(),
        degenerate,
    };
    let report = compose_report(l_pos, l_neg, l_sent, trace.neg_grad_norm, weights);
    Ok(StepOutcome { report, trace: Some(trace), g_final })
}

/// One Targeted-SAM update of `theta`. The perturbation only exists inside
/// the gradient evaluation; `theta` moves by exactly the AdamW step of
/// `g_final`.
pub fn tsam_step<T: Scalar>(
    theta: &mut ParamVector<T>,
    objectives: &StepObjectives<'_, T>,
    weights: &LossWeights<T>,
    optimizer: &mut AdamW<T>,
    delta_grad: T,
) -> Result<StepOutcome<T>, TsamError> {
    let outcome = tsam_gradient(theta, objectives, weights, delta_grad)?;
    optimizer.update(theta, &outcome.g_final);
    Ok(outcome)
}
