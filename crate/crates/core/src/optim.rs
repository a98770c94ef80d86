//! Adam optimizer and the exponential learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::Parameter;
use serde::{Deserialize, Serialize};

/// Training hyperparameters. Desk-scale defaults: the batch size and model
/// widths are reduced from the full-scale setup, while the optimizer, the
/// initial learning rate of 1e-3 and the per-epoch decay γ = 0.96 match it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-epoch exponential decay factor.
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            gamma: 0.96,
            epochs: 100,
            batch_size: 256,
            seed: 0,
            dropout_rate: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid_argument(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_argument("batch size must be ≥ 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid_argument(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// learning_rate · γ^epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.gamma.powi(epoch as i32)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update over each parameter's stored gradient.
/// `step_index` starts at 1.
pub fn adam_step(params: &mut [Parameter], step_index: usize, lr: f64) -> Result<()> {
    if step_index == 0 {
        return Err(Error::invalid_argument(
            "Adam step index starts at 1".to_string(),
        ));
    }
    let t = step_index as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for p in params {
        let g = p.grad.data();
        let m = p.moment1.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        }
        let v = p.moment2.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        }
        let m = p.moment1.data();
        let v = p.moment2.data();
        for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
