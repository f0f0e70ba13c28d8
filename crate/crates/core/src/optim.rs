//! SGD with momentum, Adam, and the learning-rate schedules.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// SGD(lr 0.1, momentum 0.9, weight decay 1e-6) for contrastive pretraining.
    pub fn ssl_default() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-6,
        }
    }

    /// Adam(lr 1e-4, weight decay 1e-5) for fine-tuning.
    pub fn finetune_default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 1e-5,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr = {lr} must be > 0")));
        }
        match *self {
            OptimizerConfig::Sgd {
                momentum,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
                    return Err(Error::Config("sgd momentum must lie in [0, 1) and weight_decay >= 0".into()));
                }
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps < 0.0 || weight_decay < 0.0 {
                    return Err(Error::Config("adam betas must lie in [0, 1), eps and weight_decay >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// `v ← momentum·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let d = g as f64 + weight_decay * *p as f64;
        let nv = momentum * *v as f64 + d;
        *v = nv as f32;
        *p = (*p as f64 - lr * nv) as f32;
    }
}

/// Adam moment state of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam with weight decay added to the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (i, (p, &g)) in param.iter_mut().zip(grad).enumerate() {
        let g = g as f64 + weight_decay * *p as f64;
        let m = beta1 * state.m[i] as f64 + (1.0 - beta1) * g;
        let v = beta2 * state.v[i] as f64 + (1.0 - beta2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let m_hat = m / c1;
        let v_hat = v / c2;
        if m_hat != 0.0 {
            *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Momentum(Vec<f32>),
    Adam(AdamState),
}

/// Per-parameter optimizer state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    slots: IndexMap<String, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            slots: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Updates every parameter accepted by `trainable` at learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, Vec<f32>>,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let names: Vec<String> = params.names().filter(|n| trainable(n)).map(str::to_string).collect();
        for name in names {
            let grad = grads.get(&name).ok_or_else(|| Error::ParamMismatch {
                name: name.clone(),
                detail: "no gradient".into(),
            })?;
            let data = params.data_mut(&name).expect("name from store");
            if grad.len() != data.len() {
                return Err(Error::ParamMismatch {
                    name,
                    detail: "gradient length differs from parameter".into(),
                });
            }
            let slot = self.slots.entry(name).or_insert_with(|| match self.config {
                OptimizerConfig::Sgd { .. } => Slot::Momentum(vec![0.0; grad.len()]),
                OptimizerConfig::Adam { .. } => Slot::Adam(AdamState::new(grad.len())),
            });
            match (&self.config, slot) {
                (
                    &OptimizerConfig::Sgd {
                        momentum,
                        weight_decay,
                        ..
                    },
                    Slot::Momentum(v),
                ) => sgd_step(data, grad, v, lr, momentum, weight_decay),
                (
                    &OptimizerConfig::Adam {
                        beta1,
                        beta2,
                        eps,
                        weight_decay,
                        ..
                    },
                    Slot::Adam(state),
                ) => adam_step(data, grad, state, lr, beta1, beta2, eps, weight_decay),
                _ => unreachable!("slot kind follows the optimizer kind"),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Cosine { lr_min: f64 },
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Epoch,
    Step,
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t / T))`, exact at both ends.
pub fn cosine_lr(t: f64, total: f64, lr_max: f64, lr_min: f64) -> f64 {
    if total <= 0.0 || t <= 0.0 {
        return lr_max;
    }
    if t >= total {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t / total).cos())
}

impl ScheduleConfig {
    pub fn lr(&self, t: f64, total: f64, lr_max: f64) -> f64 {
        match *self {
            ScheduleConfig::Cosine { lr_min } => cosine_lr(t, total, lr_max, lr_min),
            ScheduleConfig::Constant => lr_max,
        }
    }
}
