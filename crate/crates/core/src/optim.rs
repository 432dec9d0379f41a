//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(param: &Tensor, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            step: 0,
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            config,
        })
    }
}

/// Applies one Adam update using `param.grad`.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState) -> Result<()> {
    let grad = param
        .grad
        .as_ref()
        .ok_or_else(|| Error::Usage("adam_step on a parameter without a gradient".into()))?;
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Shape("Adam state does not match parameter".into()));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let grad = grad.clone();
    for (((w, g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(&grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}
