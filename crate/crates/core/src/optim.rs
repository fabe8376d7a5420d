//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of every parameter in `store`.
    ///
    /// The whole step is rejected, with nothing modified, if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Dimension {
                what: "gradient count",
                expected: store.len(),
                got: grads.len(),
            });
        }
        for (id, g) in store.ids().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        self.step_count += 1;
        let AdamWConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (idx, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let g = grads[idx].data();
            let m = self.first_moment[idx].data_mut();
            let v = self.second_moment[idx].data_mut();
            let theta = store.get_mut(id).data_mut();
            for j in 0..theta.len() {
                theta[j] -= lr * wd * theta[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
