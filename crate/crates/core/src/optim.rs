//! SGD with heavy-ball momentum and the warmup-cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        OptimState {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn insert_buffer(&mut self, name: String, buffer: Tensor) {
        self.buffers.insert(name, buffer);
    }

    /// One heavy-ball step for a single parameter:
    /// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
    ///
    /// Weight decay only applies when `decay` is set; prompts and keys are
    /// stepped with `decay = false`.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64, decay: bool) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        let buf = self
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if buf.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: param.shape().to_vec(),
                right: buf.shape().to_vec(),
            });
        }
        let wd = if decay { self.weight_decay } else { 0.0 };
        let mu = self.momentum;
        for ((theta, v), g) in param
            .data_mut()
            .iter_mut()
            .zip(buf.data_mut().iter_mut())
            .zip(grad.data())
        {
            *v = mu * *v + (g + wd * *theta);
            *theta -= lr * *v;
        }
        Ok(())
    }
}

/// Base learning rate scaled linearly with batch size from a per-256 rate.
pub fn scaled_lr(lr_per_256: f64, batch_size: usize) -> f64 {
    lr_per_256 * batch_size as f64 / 256.0
}

/// Warmup-cosine schedule.
///
/// The warmup ramp is evaluated at the end of the step (so the last warmup
/// step lands exactly on `base_lr`); the cosine span is evaluated at the
/// start of the step and reaches zero at `total_epochs`.
pub fn lr_at(
    epoch: usize,
    step_in_epoch: usize,
    steps_per_epoch: usize,
    base_lr: f64,
    warmup_epochs: f64,
    total_epochs: usize,
) -> Result<f64> {
    if warmup_epochs >= total_epochs as f64 {
        return Err(Error::Config(format!(
            "warmup_epochs ({warmup_epochs}) must be below total epochs ({total_epochs})"
        )));
    }
    if epoch >= total_epochs || steps_per_epoch == 0 || step_in_epoch >= steps_per_epoch {
        return Err(Error::invalid(
            "lr_at",
            format!("step {step_in_epoch}/{steps_per_epoch} of epoch {epoch}/{total_epochs}"),
        ));
    }
    let spe = steps_per_epoch as f64;
    let start = epoch as f64 + step_in_epoch as f64 / spe;
    let end = start + 1.0 / spe;
    if warmup_epochs > 0.0 && end <= warmup_epochs {
        return Ok(base_lr * end / warmup_epochs);
    }
    let span = total_epochs as f64 - warmup_epochs;
    let progress = ((start - warmup_epochs) / span).max(0.0);
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}
