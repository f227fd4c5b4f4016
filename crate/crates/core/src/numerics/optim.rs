use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `base · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`
    Noam { d_model: usize },
    /// `base` at every step.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
}

impl OptimizerConfig {
    /// Settings used for the full-size systems: β1 0.9, β2 0.998, ε 1e-9,
    /// learning rate 2.0 with 8000 warmup steps.
    pub fn full_size(d_model: usize) -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.998,
            epsilon: 1e-9,
            base_lr: 2.0,
            warmup_steps: 8000,
            schedule: Schedule::Noam { d_model },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta1 < beta2 < 1, got {} / {}",
                self.beta1, self.beta2
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        match self.schedule {
            Schedule::Noam { d_model } => {
                let warmup = self.warmup_steps as f64;
                self.base_lr
                    * (d_model as f64).powf(-0.5)
                    * step.powf(-0.5).min(step * warmup.powf(-1.5))
            }
            Schedule::Constant => self.base_lr,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        AdamState {
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }
}

/// One dense, bias-corrected Adam update. Returns the learning rate used.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    config: &OptimizerConfig,
    step: usize,
) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("optimizer steps start at 1".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let lr = config.learning_rate(step);
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + config.epsilon);
        }
    }
    Ok(lr)
}
