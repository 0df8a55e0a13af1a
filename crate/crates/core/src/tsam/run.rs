use serde::{Deserialize, Serialize};

use super::step::{tsam_step, StepObjectives, TsamStepTrace, DEFAULT_DELTA_GRAD};
use super::{AdamW, AdamWConfig, TsamError};
use crate::autodiff::ParamVector;
use crate::objectives::{compose_report, LossReport, LossWeights, ModelObjective, Objective, TripletBatch};
use crate::synthworld::{CuratedCorpus, Scene};
use crate::toymodel::{CaptionModel, TrainableSet};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Targeted-SAM min–max unlearning.
    Sare,
    /// Plain minimization of `L_pos + λ1·L_neg + λ2·L_sent`.
    Baseline,
    /// Gradient ascent on the negative units' `L_ft`.
    Ga,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sare => "sare",
            Method::Baseline => "baseline",
            Method::Ga => "ga",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sare" => Ok(Method::Sare),
            "baseline" => Ok(Method::Baseline),
            "ga" => Ok(Method::Ga),
            other => Err(format!("unknown method {other:?} (sare|baseline|ga)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub weights: LossWeights<f64>,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Units of each subset per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Abort when `L_pos` exceeds this multiple of its first-step value.
    pub divergence_factor: f64,
    pub delta_grad: f64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::Sare,
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            epochs: 1,
            batch_size: 16,
            seed: 0,
            divergence_factor: 10.0,
            delta_grad: DEFAULT_DELTA_GRAD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub method: Method,
    pub report: LossReport<f64>,
    pub trace: Option<TsamStepTrace<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

fn report_f64<T: Scalar>(r: &LossReport<T>) -> LossReport<f64> {
    LossReport {
        l_pos: r.l_pos.to_f64_lossy(),
        l_neg: r.l_neg.to_f64_lossy(),
        l_sent: r.l_sent.to_f64_lossy(),
        l_base: r.l_base.to_f64_lossy(),
        neg_grad_norm: r.neg_grad_norm.to_f64_lossy(),
    }
}

fn trace_f64<T: Scalar>(t: &TsamStepTrace<T>) -> TsamStepTrace<f64> {
    TsamStepTrace {
        neg_grad_norm: t.neg_grad_norm.to_f64_lossy(),
        eps_norm: t.eps_norm.to_f64_lossy(),
        eps_cosine: t.eps_cosine.to_f64_lossy(),
        neg_perturbed_grad_norm: t.neg_perturbed_grad_norm.to_f64_lossy(),
        pos_grad_norm: t.pos_grad_norm.to_f64_lossy(),
        sent_grad_norm: t.sent_grad_norm.to_f64_lossy(),
        final_grad_norm: t.final_grad_norm.to_f64_lossy(),
        degenerate: t.degenerate,
    }
}

fn cast_weights<T: Scalar>(w: &LossWeights<f64>) -> LossWeights<T> {
    LossWeights { lambda1: T::of(w.lambda1), lambda2: T::of(w.lambda2), rho: T::of(w.rho) }
}

/// Split an epoch's triplets into batches of at most `batch_size`.
pub fn epoch_batches<'a>(scenes: &'a [Scene], curated: &'a CuratedCorpus, batch_size: usize, seed: u64) -> Vec<TripletBatch<'a>> {
    curated
        .triplets(seed)
        .chunks(batch_size.max(1))
        .map(|chunk| TripletBatch {
            scenes,
            neg: chunk.iter().map(|&(n, _, _)| &curated.neg[n]).collect(),
            pos: chunk.iter().filter(|t| t.1 != usize::MAX).map(|&(_, p, _)| &curated.pos[p]).collect(),
            sent: chunk.iter().filter(|t| t.2 != usize::MAX).map(|&(_, _, s)| &curated.sent[s]).collect(),
        })
        .collect()
}

/// Gradient of one unlearning step for `method` at `theta`, with the step's
/// loss report and (for SARE) its trace.
pub fn method_gradient<T: Scalar>(
    model: &CaptionModel<T>,
    method: Method,
    batch: &TripletBatch<'_>,
    theta: &ParamVector<T>,
    weights: &LossWeights<T>,
    delta_grad: T,
) -> Result<(ParamVector<T>, LossReport<T>, Option<TsamStepTrace<T>>), TsamError> {
    let set = TrainableSet::mapping();
    let neg = ModelObjective::negative(model, set.clone(), batch.scenes, &batch.neg)?;
    let pos = ModelObjective::positive(model, set.clone(), batch.scenes, &batch.pos)?;
    let sent = ModelObjective::sentence(model, set.clone(), batch.scenes, &batch.sent)?;
    match method {
        Method::Sare => {
            let objectives = StepObjectives { neg: &neg, pos: Some(&pos), sent: Some(&sent) };
            let out = super::step::tsam_gradient(theta, &objectives, weights, delta_grad)?;
            Ok((out.g_final, out.report, out.trace))
        }
        Method::Baseline | Method::Ga => {
            let (l_neg, g_neg) = neg.value_and_grad(theta)?;
            let l_pos = pos.value(theta)?;
            let l_sent = sent.value(theta)?;
            let report = compose_report(l_pos, l_neg, l_sent, g_neg.l2_norm(), weights);
            let grad = if method == Method::Baseline {
                ModelObjective::base(model, set, batch, weights)?.value_and_grad(theta)?.1
            } else {
                g_neg
            };
            if !grad.all_finite() {
                return Err(TsamError::NonFinite(format!("{} gradient", method.name())));
            }
            Ok((grad, report, None))
        }
    }
}

/// Unlearn on the curated corpus, updating only the mapping layer.
/// `on_epoch_end` sees the model after each completed epoch.
pub fn unlearn_run<T: Scalar>(
    model: &CaptionModel<T>,
    scenes: &[Scene],
    curated: &CuratedCorpus,
    config: &UnlearnConfig,
    on_epoch_end: &mut dyn FnMut(usize, &CaptionModel<T>) -> Result<(), TsamError>,
) -> Result<(CaptionModel<T>, RunLog), TsamError> {
    if config.epochs == 0 {
        return Err(TsamError::Config("epochs must be at least 1".into()));
    }
    config.weights.validate()?;
    if curated.neg.is_empty() || curated.pos.is_empty() || curated.sent.is_empty() {
        return Err(TsamError::Config("curated corpus has an empty subset".into()));
    }
    let weights = cast_weights::<T>(&config.weights);
    let delta_grad = T::of(config.delta_grad);
    let set = TrainableSet::mapping();
    let mut model = model.clone();
    let mut theta = model.trainable_vector(&set);
    let mut optimizer = AdamW::new(config.optimizer, theta.len());
    let mut log = RunLog::default();
    let mut initial_pos: Option<f64> = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let batches = epoch_batches(scenes, curated, config.batch_size, config.seed.wrapping_add(epoch as u64));
        for batch in &batches {
            let (grad, report, trace) = if config.method == Method::Sare {
                let neg = ModelObjective::negative(&model, set.clone(), scenes, &batch.neg)?;
                let pos = ModelObjective::positive(&model, set.clone(), scenes, &batch.pos)?;
                let sent = ModelObjective::sentence(&model, set.clone(), scenes, &batch.sent)?;
                let objectives = StepObjectives { neg: &neg, pos: Some(&pos), sent: Some(&sent) };
                let out = tsam_step(&mut theta, &objectives, &weights, &mut optimizer, delta_grad)?;
                (None, out.report, out.trace)
            } else {
                let (g, r, t) = method_gradient(&model, config.method, batch, &theta, &weights, delta_grad)?;
                (Some(g), r, t)
            };
            if let Some(g) = grad {
                optimizer.update(&mut theta, &g);
            }
            model.set_trainable(&set, &theta)?;
            let report = report_f64(&report);
            let first = *initial_pos.get_or_insert(report.l_pos);
            if report.l_pos > config.divergence_factor * first {
                return Err(TsamError::Diverged { step, l_pos: report.l_pos, initial: first });
            }
            log.records.push(StepRecord { step, epoch, method: config.method, report, trace: trace.as_ref().map(trace_f64) });
            step += 1;
        }
        on_epoch_end(epoch, &model)?;
    }
    Ok((model, log))
}
