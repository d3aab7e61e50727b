use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParameterStore, Real};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights (AdamW) instead of as an L2 gradient term.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-4, decoupled: false }
    }
}

/// First/second moment buffers, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// One bias-corrected Adam update over every trainable tensor in `store`.
///
/// Fails without touching the store if any trainable tensor lacks a gradient.
pub fn adam_step<T: Real>(store: &mut ParameterStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if let Some(name) = store.iter().find(|(_, t)| t.requires_grad() && t.grad().is_none()).map(|(n, _)| n) {
        return Err(Error::Contract(format!("parameter {name} has no gradient")));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2, eps, wd) = (T::of(c.beta1), T::of(c.beta2), T::of(c.epsilon), T::of(c.weight_decay));
    let (step_size, bc2) = (T::of(lr / bc1), T::of(bc2));
    let lr_t = T::of(lr);
    for (name, p) in store.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let grad = p.grad().expect("checked above").to_vec();
        let m = state.m.entry(name.to_owned()).or_insert_with(|| vec![T::zero(); grad.len()]);
        let v = state.v.entry(name.to_owned()).or_insert_with(|| vec![T::zero(); grad.len()]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let mut g = grad[i];
            if !c.decoupled {
                g += wd * *w;
            }
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let denom = (v[i] / bc2).sqrt() + eps;
            if c.decoupled {
                *w -= lr_t * wd * *w;
            }
            *w -= step_size * m[i] / denom;
        }
    }
    Ok(())
}

/// Step decay: multiply by `gamma` every `step_size` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl StepLr {
    pub fn new(base_lr: f64) -> Self {
        Self { base_lr, step_size: 20, gamma: 0.7 }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

/// `base_lr · 0.7^⌊epoch / 20⌋`.
pub fn step_lr(epoch: usize, base_lr: f64) -> f64 {
    StepLr::new(base_lr).lr(epoch)
}
