//! Robustness attacks on unlearned models: relearning, LoRA fine-tuning and
//! exhaustive-prompt evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate, EvalReport, EvalSet, EvalSpec, MetricsError};
use crate::synthworld::{CaptionSample, Scene};
use crate::toymodel::{CaptionModel, ModelError, Partition, SeqItem, TrainableSet, DEFAULT_LORA_TARGETS};
use crate::tsam::{fit, AdamWConfig, FitConfig, TsamError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack needs {n} samples but the pool holds {pool}")]
    PoolTooSmall { n: usize, pool: usize },
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TsamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Relearn,
    Lora,
    Advprompt,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Relearn => "relearn",
            AttackKind::Lora => "lora",
            AttackKind::Advprompt => "advprompt",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relearn" => Ok(AttackKind::Relearn),
            "lora" => Ok(AttackKind::Lora),
            "advprompt" => Ok(AttackKind::Advprompt),
            other => Err(format!("unknown attack {other:?} (relearn|lora|advprompt)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Relearning sample counts as fractions of the hallucination pool.
    pub relearn_fractions: Vec<f64>,
    pub relearn_epochs: usize,
    pub relearn_partitions: Vec<Partition>,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<String>,
    pub lora_optimizer: AdamWConfig,
    pub lora_steps: usize,
    pub lora_samples: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            relearn_fractions: vec![0.02, 0.04, 0.06],
            relearn_epochs: 4,
            relearn_partitions: vec![Partition::Mapping],
            optimizer: AdamWConfig::with_lr(3e-3),
            batch_size: 8,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: DEFAULT_LORA_TARGETS.iter().map(|s| s.to_string()).collect(),
            lora_optimizer: AdamWConfig::with_lr(1e-3),
            lora_steps: 100,
            lora_samples: 800,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let f = &self.relearn_fractions;
        if f.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(AttackError::Config(format!("relearn fractions must be in (0, 1]: {f:?}")));
        }
        if f.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AttackError::Config(format!("relearn grid must be strictly increasing: {f:?}")));
        }
        if self.batch_size == 0 {
            return Err(AttackError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Absolute relearning sample counts for a pool of `pool` captions.
    pub fn relearn_grid(&self, pool: usize) -> Result<Vec<usize>, AttackError> {
        self.validate()?;
        let grid: Vec<usize> = self.relearn_fractions.iter().map(|f| ((f * pool as f64).round() as usize).max(1)).collect();
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AttackError::Config(format!("pool of {pool} too small for distinct grid points {grid:?}")));
        }
        if let Some(&n) = grid.iter().find(|&&n| n > pool) {
            return Err(AttackError::PoolTooSmall { n, pool });
        }
        Ok(grid)
    }
}

/// Fine-tuning items of whole captions.
pub fn caption_items<'a>(scenes: &'a [Scene], samples: &[&CaptionSample]) -> Vec<SeqItem<'a>> {
    samples
        .iter()
        .map(|s| SeqItem {
            encoding: &scenes[s.scene_id].encoding,
            tokens: [s.prompt.as_slice(), s.caption.as_slice()].concat(),
            n_context: s.prompt.len(),
            weight: 1.0,
        })
        .collect()
}

/// Seeded order in which pool samples are drawn; grid point `n` takes the first `n`.
pub fn pool_order(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Fine-tune a copy of `model` on the first `n` pool items in the seeded order.
pub fn relearn_attack<T: Scalar>(
    model: &CaptionModel<T>,
    pool: &[SeqItem<'_>],
    n: usize,
    config: &AttackConfig,
) -> Result<CaptionModel<T>, AttackError> {
    if n > pool.len() {
        return Err(AttackError::PoolTooSmall { n, pool: pool.len() });
    }
    let mut out = model.clone();
    if n == 0 {
        return Ok(out);
    }
    let order = pool_order(pool.len(), config.seed);
    let items: Vec<SeqItem<'_>> = order[..n].iter().map(|&i| pool[i].clone()).collect();
    let fit_config = FitConfig {
        optimizer: config.optimizer,
        epochs: config.relearn_epochs,
        batch_size: config.batch_size,
        max_steps: None,
        seed: config.seed,
    };
    fit(&mut out, &items, &TrainableSet::new(&config.relearn_partitions), &fit_config)?;
    Ok(out)
}

/// LoRA fine-tuning on general captions: only adapters train; the merged
/// model is returned.
pub fn lora_attack<T: Scalar>(model: &CaptionModel<T>, pool: &[SeqItem<'_>], config: &AttackConfig) -> Result<CaptionModel<T>, AttackError> {
    let targets: Vec<&str> = config.lora_targets.iter().map(String::as_str).collect();
    let mut adapted = model.attach_lora(config.lora_rank, config.lora_alpha, &targets, config.seed)?;
    let n = config.lora_samples.min(pool.len());
    let order = pool_order(pool.len(), config.seed ^ 0x10_0A);
    let items: Vec<SeqItem<'_>> = order[..n].iter().map(|&i| pool[i].clone()).collect();
    let fit_config = FitConfig {
        optimizer: config.lora_optimizer,
        epochs: usize::MAX,
        batch_size: config.batch_size,
        max_steps: Some(config.lora_steps),
        seed: config.seed,
    };
    if config.lora_steps > 0 && !items.is_empty() {
        fit(&mut adapted, &items, &TrainableSet::adapters(), &fit_config)?;
    }
    Ok(adapted.merge_lora()?)
}

/// Metrics under the exhaustive-listing prompt; the model is not changed.
pub fn adversarial_prompt_eval<T: Scalar>(
    model: &CaptionModel<T>,
    reference: &CaptionModel<T>,
    reference_encoding: &[f64],
    set: &EvalSet<'_>,
    spec: &EvalSpec,
) -> Result<EvalReport, AttackError> {
    let spec = EvalSpec { exhaustive_prompt: true, ..spec.clone() };
    Ok(evaluate(model, reference, reference_encoding, set, &spec)?)
}

/// Metric snapshots along a relearning grid, starting at `n = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReboundCurve {
    pub points: Vec<(usize, EvalReport)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReboundRow {
    pub method: String,
    pub attack: String,
    pub n: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl ReboundCurve {
    /// Final minus initial value of `metric`.
    pub fn rebound(&self, metric: &str) -> Option<f64> {
        let get = |r: &EvalReport| r.metrics().into_iter().find(|(m, _)| *m == metric).map(|(_, v)| v);
        Some(get(&self.points.last()?.1)? - get(&self.points.first()?.1)?)
    }

    pub fn rows(&self, method: &str, attack: &str, seed: u64) -> Vec<ReboundRow> {
        let mut out = Vec::new();
        for (n, report) in &self.points {
            for (metric, value) in report.metrics() {
                out.push(ReboundRow { method: method.into(), attack: attack.into(), n: *n, metric: metric.into(), value, seed });
            }
        }
        out
    }
}

/// Attack independent copies of `model` at `n = 0` and each grid point, then
/// evaluate each on the same held-out set.
pub fn relearn_curve<T: Scalar>(
    model: &CaptionModel<T>,
    pool: &[SeqItem<'_>],
    config: &AttackConfig,
    evaluate_point: &mut dyn FnMut(&CaptionModel<T>) -> Result<EvalReport, AttackError>,
) -> Result<ReboundCurve, AttackError> {
    let mut grid = vec![0];
    grid.extend(config.relearn_grid(pool.len())?);
    let mut points = Vec::with_capacity(grid.len());
    for n in grid {
        let attacked = relearn_attack(model, pool, n, config)?;
        points.push((n, evaluate_point(&attacked)?));
    }
    Ok(ReboundCurve { points })
}

#[cfg(test)]
mod tests;
