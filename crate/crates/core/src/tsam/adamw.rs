use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-5, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// AdamW with decoupled weight decay: `θ ← θ(1 − η·wd) − η·m̂/(√v̂ + ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: ParamVector<T>,
    v: ParamVector<T>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self { config, m: ParamVector::zeros(n_params), v: ParamVector::zeros(n_params), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn first_moment(&self) -> &ParamVector<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamVector<T> {
        &self.v
    }

    pub fn update(&mut self, theta: &mut ParamVector<T>, grad: &ParamVector<T>) {
        assert_eq!(theta.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let bias1 = one - b1.powi(self.step as i32);
        let bias2 = one - b2.powi(self.step as i32);
        let lr = T::of(c.lr);
        let decay = one - lr * T::of(c.weight_decay);
        let eps = T::of(c.eps);
        let (m, v) = (self.m.as_mut_slice(), self.v.as_mut_slice());
        for (i, th) in theta.as_mut_slice().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            *th = *th * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
