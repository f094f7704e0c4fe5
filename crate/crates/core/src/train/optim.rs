use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// AdamW with decoupled weight decay. Decay only touches matrices; biases,
/// gains and scalar spectral weights are left alone.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

fn decays(t: &Tensor) -> bool {
    t.rows > 1 && t.cols > 1
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// entry are untouched (no decay either).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let c = self.cfg;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::arg(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient for {name} is {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let wd = if decays(p) { c.weight_decay } else { 0.0 };
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + c.eps) + wd * p.data[i]);
            }
        }
        Ok(())
    }
}

pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if max_norm > 0.0 && n > max_norm {
        let s = max_norm / n;
        for g in grads.values_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}

/// Triangular cyclic learning rate, measured in epochs (fractional epochs
/// allowed). Starts at `lr_min`, peaks at `lr_max` half a period later.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CyclicLr {
    pub lr_min: f64,
    pub lr_max: f64,
    pub period_epochs: f64,
}

impl Default for CyclicLr {
    fn default() -> Self {
        Self {
            lr_min: 1e-5,
            lr_max: 1e-4,
            period_epochs: 10.0,
        }
    }
}

impl CyclicLr {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_max >= self.lr_min && self.period_epochs > 0.0) {
            return Err(Error::Config(format!("bad cyclic LR {self:?}")));
        }
        Ok(())
    }

    pub fn at(&self, epoch: f64) -> f64 {
        let phase = (epoch / self.period_epochs).fract();
        let tri = 1.0 - (2.0 * phase - 1.0).abs();
        self.lr_min + (self.lr_max - self.lr_min) * tri
    }
}
