use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CaptionModel, LoraSpec, ModelError, ParamEntry, Partition};
use crate::autodiff::Tensor;
use crate::Scalar;

/// Matrices adapted by default: the mapping layer and the decoder's hidden layer.
pub const DEFAULT_LORA_TARGETS: [&str; 2] = ["map.w", "dec.w1"];

impl<T: Scalar> CaptionModel<T> {
    /// Copy of the model with rank-`rank` adapters on `targets`. The `down`
    /// factor is Gaussian and the `up` factor zero, so outputs are unchanged.
    pub fn attach_lora(&self, rank: usize, alpha: f64, targets: &[&str], seed: u64) -> Result<Self, ModelError> {
        if self.lora().is_some() {
            return Err(ModelError::Lora("adapters already attached".into()));
        }
        if targets.is_empty() {
            return Err(ModelError::Lora("no target matrices".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for &name in targets {
            let base = self.param(name)?;
            let [rows, cols] = base.shape() else {
                return Err(ModelError::Lora(format!("{name} is not a matrix")));
            };
            let (rows, cols) = (*rows, *cols);
            let max = rows.min(cols);
            if rank == 0 || rank > max {
                return Err(ModelError::LoraRank { rank, max });
            }
            let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
            let down: Vec<T> = (0..rank * cols).map(|_| T::of(normal.sample(&mut rng))).collect();
            out.params_mut().push(ParamEntry {
                name: format!("lora.{name}.down"),
                partition: Partition::Adapter,
                tensor: Tensor::matrix(rank, cols, down)?,
            });
            out.params_mut().push(ParamEntry {
                name: format!("lora.{name}.up"),
                partition: Partition::Adapter,
                tensor: Tensor::zeros(&[rows, rank]),
            });
        }
        out.set_lora(Some(LoraSpec { rank, alpha, targets: targets.iter().map(|s| s.to_string()).collect() }));
        Ok(out)
    }

    /// Fold adapters into their base matrices and drop them.
    pub fn merge_lora(&self) -> Result<Self, ModelError> {
        let Some(spec) = self.lora().cloned() else {
            return Ok(self.clone());
        };
        let scale = T::of(spec.scaling());
        let mut out = self.clone();
        for name in &spec.targets {
            let up = self.param(&format!("lora.{name}.up"))?;
            let down = self.param(&format!("lora.{name}.down"))?;
            let (rows, r) = (up.shape()[0], up.shape()[1]);
            let cols = down.shape()[1];
            let base = out.param_mut(name)?;
            let data = base.data_mut();
            for i in 0..rows {
                for j in 0..cols {
                    let mut acc = T::zero();
                    for k in 0..r {
                        acc = acc + up.data()[i * r + k] * down.data()[k * cols + j];
                    }
                    data[i * cols + j] = data[i * cols + j] + scale * acc;
                }
            }
        }
        out.params_mut().retain(|p| p.partition != Partition::Adapter);
        out.set_lora(None);
        Ok(out)
    }
}
