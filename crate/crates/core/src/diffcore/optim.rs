use std::collections::BTreeMap;

use super::{DiffError, ParamGroup, Result};

/// Adam hyperparameters. `clip_norm` is applied jointly over every gradient
/// passed to one `step` call, before any moment update.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

/// Adam with bias correction. Moments are keyed by `group/param` so one
/// optimizer instance can drive several parameter groups in lockstep.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter (with a populated gradient) in
    /// `groups`. Gradients are clipped by their joint global norm first.
    /// Returns the pre-clip norm. Gradients are left in place; callers zero
    /// them before the next accumulation pass.
    pub fn step(&mut self, groups: &[&ParamGroup]) -> Result<f64> {
        let mut sq_sum = 0.0;
        for g in groups {
            for (_, p) in g.iter() {
                if let Some(grad) = p.borrow().grad() {
                    sq_sum += grad.iter().map(|x| x * x).sum::<f64>();
                }
            }
        }
        let norm = sq_sum.sqrt();
        if !norm.is_finite() {
            return Err(DiffError::NonFinite {
                context: format!("gradient norm before optimizer step {}", self.step + 1),
            });
        }
        let scale = match self.cfg.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);

        for g in groups {
            for (name, p) in g.iter() {
                let key = format!("{}/{}", g.name(), name);
                let mut tensor = p.borrow_mut();
                let Some(grad) = tensor.grad().map(|s| s.to_vec()) else {
                    continue;
                };
                let (m, v) = self
                    .moments
                    .entry(key)
                    .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                let data = tensor.data_mut();
                for i in 0..grad.len() {
                    let gi = grad[i] * scale;
                    m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                    v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                }
            }
        }
        Ok(norm)
    }
}

/// Scales every gradient in `groups` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(groups: &[&ParamGroup], max_norm: f64) -> f64 {
    let mut sq_sum = 0.0;
    for g in groups {
        for (_, p) in g.iter() {
            if let Some(grad) = p.borrow().grad() {
                sq_sum += grad.iter().map(|x| x * x).sum::<f64>();
            }
        }
    }
    let norm = sq_sum.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in groups {
            for (_, p) in g.iter() {
                if let Some(grad) = p.borrow_mut().grad_mut() {
                    for x in grad.iter_mut() {
                        *x *= scale;
                    }
                }
            }
        }
    }
    norm
}

/// Polyak/EMA update: `target <- (1 - tau) * target + tau * online`,
/// matched by parameter name. Target tensors stay frozen.
pub fn ema_update(target: &ParamGroup, online: &ParamGroup, tau: f64) -> Result<()> {
    for (name, op) in online.iter() {
        let tp = target.get(name)?;
        let ov = op.borrow();
        let mut tv = tp.borrow_mut();
        if tv.shape() != ov.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "ema_update",
                detail: format!(
                    "{name}: target {:?} vs online {:?}",
                    tv.shape(),
                    ov.shape()
                ),
            });
        }
        for (t, &o) in tv.data_mut().iter_mut().zip(ov.data()) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
    Ok(())
}
