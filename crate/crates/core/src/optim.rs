//! Momentum SGD for network weights, Adam for architecture parameters, and
//! the polynomial learning-rate policy.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            base_lr: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(base_lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            base_lr,
            momentum,
            weight_decay,
            ..Default::default()
        }
    }

    pub fn adam(base_lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            base_lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "optimizer config";
        if !(self.base_lr > 0.0) {
            return Err(invalid(OP, format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(OP, format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid(OP, format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Polynomial decay: `base_lr · (1 − iter/max_iter)^power`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub max_iter: usize,
    pub power: f64,
}

impl LrSchedule {
    pub fn poly(base_lr: f64, max_iter: usize) -> Self {
        LrSchedule {
            base_lr,
            max_iter,
            power: 0.9,
        }
    }

    pub fn lr(&self, iter: usize) -> f64 {
        poly_lr(iter, self)
    }
}

/// Scheduled rate at `iter`; iterations past `max_iter` get 0.
pub fn poly_lr(iter: usize, schedule: &LrSchedule) -> f64 {
    if iter >= schedule.max_iter {
        return 0.0;
    }
    let frac = 1.0 - iter as f64 / schedule.max_iter as f64;
    schedule.base_lr * libm::pow(frac, schedule.power)
}

fn check_finite(name: &str, g: &[f64]) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient of `{name}`"),
        });
    }
    Ok(())
}

/// One momentum-SGD update on a flat buffer:
/// `v ← m·v + g + wd·p`, `p ← p − lr·v`.
pub fn sgd_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Adam moments for one buffer.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamMoments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update on a flat buffer.
pub fn adam_update(p: &mut [f64], g: &[f64], st: &mut AdamMoments, lr: f64, cfg: &OptimizerConfig) {
    if st.m.len() != p.len() {
        st.m = vec![0.0; p.len()];
        st.v = vec![0.0; p.len()];
        st.step = 0;
    }
    st.step += 1;
    let bc1 = 1.0 - libm::pow(cfg.beta1, st.step as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, st.step as f64);
    for i in 0..p.len() {
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = st.m[i] / bc1;
        let vhat = st.v[i] / bc2;
        p[i] -= lr * mhat / (libm::sqrt(vhat) + cfg.epsilon);
    }
}

/// Momentum SGD over the network weights of a [`ParamStore`].
///
/// Weight decay is applied to convolution kernels only.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: OptimizerConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig) -> Self {
        Sgd {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every network weight that currently holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.kind.is_network_weight() && p.tensor.grad().is_some())
            .map(|(id, _)| id)
            .collect();
        for id in &ids {
            let p = store.param(*id);
            check_finite(&p.name, p.tensor.grad().expect("filtered"))?;
        }
        for id in ids {
            let (name, kind) = {
                let p = store.param(id);
                (p.name.clone(), p.kind)
            };
            let decay = if kind == ParamKind::ConvWeight {
                self.config.weight_decay
            } else {
                0.0
            };
            let t = store.tensor_mut(id);
            let g = t.grad().expect("filtered").to_vec();
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| vec![0.0; g.len()]);
            sgd_update(t.data_mut(), &g, v, lr, self.config.momentum, decay);
        }
        Ok(())
    }

    pub fn state(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.velocity
    }

    pub fn set_state(&mut self, velocity: BTreeMap<String, Vec<f64>>) {
        self.velocity = velocity;
    }
}

/// Adam over the architecture parameters (α and β) of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: OptimizerConfig,
    moments: BTreeMap<String, AdamMoments>,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Self {
        Adam {
            config,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.kind.is_architecture() && p.tensor.grad().is_some())
            .map(|(id, _)| id)
            .collect();
        for id in &ids {
            let p = store.param(*id);
            check_finite(&p.name, p.tensor.grad().expect("filtered"))?;
        }
        for id in ids {
            let name = store.param(id).name.clone();
            let t = store.tensor_mut(id);
            let g = t.grad().expect("filtered").to_vec();
            let st = self.moments.entry(name).or_default();
            adam_update(t.data_mut(), &g, st, lr, &self.config);
        }
        Ok(())
    }

    pub fn state(&self) -> &BTreeMap<String, AdamMoments> {
        &self.moments
    }

    pub fn set_state(&mut self, moments: BTreeMap<String, AdamMoments>) {
        self.moments = moments;
    }
}
