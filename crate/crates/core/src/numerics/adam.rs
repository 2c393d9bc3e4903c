// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<F = f32> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<F: Real> AdamState<F> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `lr_scale` multiplies
/// the configured learning rate (used for schedules).
pub fn adam_step<F: Real>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    state: &mut AdamState<F>,
    lr_scale: F,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dims("adam_step", param.shape(), grad.shape()));
    }
    if param.shape() != state.m.shape() {
        return Err(Error::dims("adam_step", param.shape(), state.m.shape()));
    }
    state.t += 1;
    let c = state.config;
    let b1 = F::lit(c.beta1 as f64);
    let b2 = F::lit(c.beta2 as f64);
    let eps = F::lit(c.epsilon as f64);
    let lr = F::lit(c.lr as f64) * lr_scale;
    let t = state.t as i32;
    let bc1 = F::one() - b1.powi(t);
    let bc2 = F::one() - b2.powi(t);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = b1 * *m + (F::one() - b1) * g;
        *v = b2 * *v + (F::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
