//! SGD with momentum and coupled weight decay, the step learning-rate
//! schedule, and the learning-rate compensation used for momentum-free
//! sparse parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.08,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// One classical momentum update:
/// `v ← m·v + g + wd·p`, then `p ← p − lr·v`.
///
/// A non-finite gradient rejects the update and leaves `param` and `velocity`
/// untouched.
pub fn dense_sgd_step<T: Scalar>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::dim("dense_sgd_step", param.shape(), grad.shape()));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let (lr, m, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Velocity buffers for dense parameters, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct SgdState<T> {
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new() -> Self {
        SgdState {
            velocity: BTreeMap::new(),
        }
    }

    /// Applies [`dense_sgd_step`] to `param` using its accumulated gradient.
    pub fn step(&mut self, param: &mut Param<T>, cfg: &SgdConfig) -> Result<()> {
        let v = self
            .velocity
            .entry(param.name.clone())
            .or_insert_with(|| Tensor::zeros(param.value.shape()));
        dense_sgd_step(&param.name, &mut param.value, &param.grad, v, cfg)
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }
}

/// `base_lr · gamma^floor(epoch / step_epochs)`.
pub fn lr_schedule(base_lr: f64, epoch: usize, gamma: f64, step_epochs: usize) -> f64 {
    let step_epochs = step_epochs.max(1);
    base_lr * gamma.powi((epoch / step_epochs) as i32)
}

/// Learning rate giving a momentum-free update the same total effect as a
/// single gradient under momentum `m`: `Σₙ lr·mⁿ = lr / (1 − m)`.
pub fn momentum_compensated_lr(lr: f64, momentum: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
    }
    Ok(lr / (1.0 - momentum))
}
