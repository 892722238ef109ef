//! SGD with momentum and weight decay, plus learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{PlmError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Step,
}

/// Stage-level optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_step_factor")]
    pub step_factor: f64,
}

fn default_step_factor() -> f64 {
    10.0
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 5e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: ScheduleKind::Cosine,
            milestones: Vec::new(),
            step_factor: 10.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(PlmError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PlmError::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(PlmError::Config("weight decay must be nonnegative".into()));
        }
        if self.schedule == ScheduleKind::Step && self.step_factor <= 0.0 {
            return Err(PlmError::Config("step factor must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for `epoch` of `total_epochs`.
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> Result<f64> {
        lr_schedule(
            self.schedule,
            epoch,
            total_epochs,
            self.lr,
            &self.milestones,
            self.step_factor,
        )
    }
}

/// cosine: lr0 * 0.5 * (1 + cos(pi * epoch / total));
/// step: lr0 divided by `factor` once per milestone already passed.
pub fn lr_schedule(
    kind: ScheduleKind,
    epoch: usize,
    total_epochs: usize,
    lr0: f64,
    milestones: &[usize],
    factor: f64,
) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(PlmError::Domain(format!(
            "epoch {epoch} out of range for {total_epochs} total epochs"
        )));
    }
    match kind {
        ScheduleKind::Cosine => {
            let t = epoch as f64 / total_epochs as f64;
            Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
        }
        ScheduleKind::Step => {
            let passed = milestones.iter().filter(|&&m| epoch > m).count();
            Ok(lr0 / factor.powi(passed as i32))
        }
    }
}

/// Momentum and velocity state for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            velocities: Vec::new(),
        }
    }
}

/// velocity = momentum * velocity + grad + weight_decay * param;
/// param -= lr * velocity. Parameters without a gradient are skipped.
/// Parameter order must stay fixed across calls.
pub fn sgd_step(state: &mut OptimizerState, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if state.velocities.is_empty() {
        state.velocities = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if state.velocities.len() != params.len() {
        return Err(PlmError::Shape(
            "optimizer state does not match parameter count".into(),
        ));
    }
    for (param, vel) in params.iter_mut().zip(state.velocities.iter_mut()) {
        if vel.len() != param.numel() {
            return Err(PlmError::Shape(
                "velocity buffer does not match parameter shape".into(),
            ));
        }
        let Some(grad) = param.grad() else { continue };
        let grad = grad.to_vec();
        let (mu, wd) = (state.momentum, state.weight_decay);
        for ((v, p), g) in vel.iter_mut().zip(param.data_mut().iter_mut()).zip(grad) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}
