//! Unlearning losses over curated units.
//!
//! Every loss is built on the fine-tuning loss `L_ft` (mean per-token NLL of
//! the scored span) averaged over a batch:
//! `L_pos = mean L_ft(pos)`, `L_neg = −mean L_ft(neg)`, `L_sent = mean L_ft(sent)`,
//! `L_base = L_pos + λ1·L_neg + λ2·L_sent`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamVector;
use crate::synthworld::{Scene, SentenceSample, UnlearnUnit};
use crate::toymodel::{CaptionModel, ModelError, SeqItem, TrainableSet};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights<T> {
    /// Weight of the negative (forgetting) loss.
    pub lambda1: T,
    /// Weight of the sentence preservation loss.
    pub lambda2: T,
    /// Perturbation radius.
    pub rho: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        Self { lambda1: T::of(0.3), lambda2: T::of(0.2), rho: T::of(0.05) }
    }
}

impl<T: Scalar> LossWeights<T> {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ok = |x: T| x >= T::zero() && x.is_finite();
        if ok(self.lambda1) && ok(self.lambda2) && ok(self.rho) {
            Ok(())
        } else {
            Err(ObjectiveError::Weights(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub l_pos: T,
    pub l_neg: T,
    pub l_sent: T,
    pub l_base: T,
    pub neg_grad_norm: T,
}

/// A differentiable function of a flat parameter vector.
pub trait Objective<T: Scalar> {
    fn value(&self, theta: &ParamVector<T>) -> Result<T, ObjectiveError>;
    fn value_and_grad(&self, theta: &ParamVector<T>) -> Result<(T, ParamVector<T>), ObjectiveError>;
}

/// One step's worth of curated data.
#[derive(Clone, Debug)]
pub struct TripletBatch<'a> {
    pub scenes: &'a [Scene],
    pub neg: Vec<&'a UnlearnUnit>,
    pub pos: Vec<&'a UnlearnUnit>,
    pub sent: Vec<&'a SentenceSample>,
}

pub fn unit_items<'a>(scenes: &'a [Scene], units: &[&UnlearnUnit], weight: f64) -> Vec<SeqItem<'a>> {
    units
        .iter()
        .map(|u| {
            let context = u.context();
            let n_context = context.len();
            SeqItem { encoding: &scenes[u.scene_id].encoding, tokens: [context, u.cur.clone()].concat(), n_context, weight }
        })
        .collect()
}

pub fn sentence_items<'a>(scenes: &'a [Scene], sents: &[&SentenceSample], weight: f64) -> Vec<SeqItem<'a>> {
    sents
        .iter()
        .map(|s| SeqItem {
            encoding: &scenes[s.scene_id].encoding,
            tokens: [s.prompt.as_slice(), s.caption.as_slice()].concat(),
            n_context: s.prompt.len(),
            weight,
        })
        .collect()
}

/// Weighted sum of `L_ft` terms over a fixed item list, as a function of the
/// trainable parameters of `model`.
pub struct ModelObjective<'m, 'a, T> {
    model: &'m CaptionModel<T>,
    set: TrainableSet,
    items: Vec<SeqItem<'a>>,
}

impl<'m, 'a, T: Scalar> ModelObjective<'m, 'a, T> {
    pub fn new(model: &'m CaptionModel<T>, set: TrainableSet, items: Vec<SeqItem<'a>>) -> Self {
        Self { model, set, items }
    }

    /// `L_pos` over `units`.
    pub fn positive(model: &'m CaptionModel<T>, set: TrainableSet, scenes: &'a [Scene], units: &[&UnlearnUnit]) -> Result<Self, ObjectiveError> {
        if units.is_empty() {
            return Err(ObjectiveError::EmptyBatch("positive"));
        }
        Ok(Self::new(model, set, unit_items(scenes, units, 1.0 / units.len() as f64)))
    }

    /// `L_neg = −L_ft` over `units`.
    pub fn negative(model: &'m CaptionModel<T>, set: TrainableSet, scenes: &'a [Scene], units: &[&UnlearnUnit]) -> Result<Self, ObjectiveError> {
        if units.is_empty() {
            return Err(ObjectiveError::EmptyBatch("negative"));
        }
        Ok(Self::new(model, set, unit_items(scenes, units, -1.0 / units.len() as f64)))
    }

    /// `L_sent` over whole captions.
    pub fn sentence(model: &'m CaptionModel<T>, set: TrainableSet, scenes: &'a [Scene], sents: &[&SentenceSample]) -> Result<Self, ObjectiveError> {
        if sents.is_empty() {
            return Err(ObjectiveError::EmptyBatch("sentence"));
        }
        Ok(Self::new(model, set, sentence_items(scenes, sents, 1.0 / sents.len() as f64)))
    }

    /// `L_base` recorded on a single tape.
    pub fn base(model: &'m CaptionModel<T>, set: TrainableSet, batch: &TripletBatch<'a>, weights: &LossWeights<T>) -> Result<Self, ObjectiveError> {
        check_batch(batch)?;
        let l1 = weights.lambda1.to_f64_lossy();
        let l2 = weights.lambda2.to_f64_lossy();
        let mut items = unit_items(batch.scenes, &batch.pos, 1.0 / batch.pos.len() as f64);
        items.extend(unit_items(batch.scenes, &batch.neg, -l1 / batch.neg.len() as f64));
        items.extend(sentence_items(batch.scenes, &batch.sent, l2 / batch.sent.len() as f64));
        items.retain(|i| i.weight != 0.0);
        if items.is_empty() {
            return Err(ObjectiveError::EmptyBatch("base"));
        }
        Ok(Self::new(model, set, items))
    }
}

impl<T: Scalar> Objective<T> for ModelObjective<'_, '_, T> {
    fn value(&self, theta: &ParamVector<T>) -> Result<T, ObjectiveError> {
        let (v, _) = self.model.loss_and_grad(&self.items, &self.set, Some(theta), false)?;
        Ok(v)
    }

    fn value_and_grad(&self, theta: &ParamVector<T>) -> Result<(T, ParamVector<T>), ObjectiveError> {
        let (v, g) = self.model.loss_and_grad(&self.items, &self.set, Some(theta), true)?;
        let g = g.expect("gradient requested");
        if !g.all_finite() || !v.is_finite() {
            return Err(ObjectiveError::NonFinite("gradient"));
        }
        Ok((v, g))
    }
}

fn check_batch(batch: &TripletBatch<'_>) -> Result<(), ObjectiveError> {
    if batch.neg.is_empty() {
        return Err(ObjectiveError::EmptyBatch("negative"));
    }
    if batch.pos.is_empty() {
        return Err(ObjectiveError::EmptyBatch("positive"));
    }
    if batch.sent.is_empty() {
        return Err(ObjectiveError::EmptyBatch("sentence"));
    }
    Ok(())
}

pub fn loss_pos<T: Scalar>(model: &CaptionModel<T>, scenes: &[Scene], units: &[&UnlearnUnit]) -> Result<T, ObjectiveError> {
    let set = TrainableSet::mapping();
    ModelObjective::positive(model, set.clone(), scenes, units)?.value(&model.trainable_vector(&set))
}

pub fn loss_neg<T: Scalar>(model: &CaptionModel<T>, scenes: &[Scene], units: &[&UnlearnUnit]) -> Result<T, ObjectiveError> {
    let set = TrainableSet::mapping();
    ModelObjective::negative(model, set.clone(), scenes, units)?.value(&model.trainable_vector(&set))
}

pub fn loss_sent<T: Scalar>(model: &CaptionModel<T>, scenes: &[Scene], sents: &[&SentenceSample]) -> Result<T, ObjectiveError> {
    let set = TrainableSet::mapping();
    ModelObjective::sentence(model, set.clone(), scenes, sents)?.value(&model.trainable_vector(&set))
}

/// `L_base` with its components, and `‖∇_θφ L_neg‖₂`.
pub fn loss_base<T: Scalar>(model: &CaptionModel<T>, batch: &TripletBatch<'_>, weights: &LossWeights<T>) -> Result<LossReport<T>, ObjectiveError> {
    check_batch(batch)?;
    let set = TrainableSet::mapping();
    let theta = model.trainable_vector(&set);
    let l_pos = ModelObjective::positive(model, set.clone(), batch.scenes, &batch.pos)?.value(&theta)?;
    let (l_neg, g_neg) = ModelObjective::negative(model, set.clone(), batch.scenes, &batch.neg)?.value_and_grad(&theta)?;
    let l_sent = ModelObjective::sentence(model, set, batch.scenes, &batch.sent)?.value(&theta)?;
    Ok(compose_report(l_pos, l_neg, l_sent, g_neg.l2_norm(), weights))
}

pub fn compose_report<T: Scalar>(l_pos: T, l_neg: T, l_sent: T, neg_grad_norm: T, weights: &LossWeights<T>) -> LossReport<T> {
    LossReport { l_pos, l_neg, l_sent, l_base: l_pos + weights.lambda1 * l_neg + weights.lambda2 * l_sent, neg_grad_norm }
}

/// Sharpness-regularized objective `J(θ) = L(θ) + ρ‖∇L(θ)‖₂`; returns
/// `(J, ‖∇L‖₂)`.
pub fn sharpness_penalty<T: Scalar>(objective: &dyn Objective<T>, theta: &ParamVector<T>, rho: T) -> Result<(T, T), ObjectiveError> {
    if !(rho >= T::zero()) {
        return Err(ObjectiveError::Weights(format!("rho={rho}")));
    }
    let (value, grad) = objective.value_and_grad(theta)?;
    let norm = grad.l2_norm();
    if !norm.is_finite() {
        return Err(ObjectiveError::NonFinite("gradient norm"));
    }
    Ok((value + rho * norm, norm))
}

/// [`sharpness_penalty`] of `L_neg` on a model's mapping layer.
pub fn neg_sharpness_penalty<T: Scalar>(model: &CaptionModel<T>, scenes: &[Scene], units: &[&UnlearnUnit], rho: T) -> Result<(T, T), ObjectiveError> {
    let set = TrainableSet::mapping();
    let objective = ModelObjective::negative(model, set.clone(), scenes, units)?;
    sharpness_penalty(&objective, &model.trainable_vector(&set), rho)
}

#[cfg(test)]
mod tests;
