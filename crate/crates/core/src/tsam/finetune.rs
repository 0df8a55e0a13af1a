use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, TsamError};
use crate::toymodel::{CaptionModel, SeqItem, TrainableSet};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many updates even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { optimizer: AdamWConfig::with_lr(3e-3), epochs: 1, batch_size: 32, max_steps: None, seed: 0 }
    }
}

/// Plain `L_ft` minimization over `items` (their weights act as relative
/// importance), updating only `set`. Returns the per-step batch losses.
pub fn fit<T: Scalar>(model: &mut CaptionModel<T>, items: &[SeqItem<'_>], set: &TrainableSet, config: &FitConfig) -> Result<Vec<f64>, TsamError> {
    if items.is_empty() || config.batch_size == 0 {
        return Ok(Vec::new());
    }
    let mut theta = model.trainable_vector(set);
    let mut optimizer = AdamW::new(config.optimizer, theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    'outer: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| losses.len() >= m) {
                break 'outer;
            }
            let batch: Vec<SeqItem<'_>> = chunk
                .iter()
                .map(|&i| SeqItem { weight: items[i].weight / chunk.len() as f64, ..items[i].clone() })
                .collect();
            let (loss, grad) = model.loss_and_grad(&batch, set, Some(&theta), true)?;
            let grad = grad.expect("gradient requested");
            if !grad.all_finite() {
                return Err(TsamError::NonFinite("fine-tuning gradient".into()));
            }
            optimizer.update(&mut theta, &grad);
            model.set_trainable(set, &theta)?;
            losses.push(loss.to_f64_lossy());
        }
    }
    Ok(losses)
}
