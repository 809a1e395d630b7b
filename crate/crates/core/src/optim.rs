use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;

/// AdamW hyperparameters. Weight decay is decoupled: it is applied directly
/// to the parameter, not mixed into the gradient moments.
#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0,1), got {v}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First/second moment buffers plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new() -> Self {
        OptimState::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over every parameter that received a gradient.
/// Parameters absent from `grads` are left untouched, moments included.
pub fn adamw_step(
    cfg: &AdamWConfig,
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimState,
) -> Result<()> {
    cfg.validate()?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (name, g) in grads.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name:?}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "parameter {name:?} is {:?} but gradient is {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n {
            return Err(Error::shape(
                "adamw_step",
                format!("moment buffer for {name:?} has stale size"),
            ));
        }
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            pd[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * pd[i]);
        }
    }
    Ok(())
}
