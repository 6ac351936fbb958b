//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warm-up then linear decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SrmError};
use crate::model::ModelParams;
use crate::real::Real;

fn default_lr() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.01
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// `None` disables clipping.
    #[serde(default = "default_clip")]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub warmup_steps: u64,
    /// Step at which the learning rate reaches zero; zero keeps it constant
    /// after warm-up.
    #[serde(default)]
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_wd(),
            max_grad_norm: default_clip(),
            warmup_steps: 0,
            total_steps: 0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate used by zero-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == 0 {
            return self.lr;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        self.lr * (self.total_steps - step) as f64 / span as f64
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    /// Updates applied so far.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Scale `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grads.l2_norm().f64();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for t in grads.tensors_mut() {
            for v in t.data.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>, config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One AdamW update. Gradients are clipped in place first; a non-finite
    /// gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &mut ModelParams<T>) -> Result<StepStats> {
        let cfg = self.config.clone();
        let grad_norm = match cfg.max_grad_norm {
            Some(max) => clip_grad_norm(grads, max),
            None => grads.l2_norm().f64(),
        };
        if let Some(name) = grads.first_non_finite() {
            return Err(SrmError::NonFinite(format!("gradient of {name}")));
        }
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let decay = T::of(1.0 - lr * cfg.weight_decay);
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(cfg.eps);
        let views = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in views {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] * decay - step_size * m.data[i] / denom;
            }
        }
        Ok(StepStats { lr, grad_norm })
    }
}
