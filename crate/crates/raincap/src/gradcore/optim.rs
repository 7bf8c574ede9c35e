//! Adam with bias correction.

use super::params::ParamStore;
use super::{GradError, Result};

/// Adam hyperparameters. Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Copy, Clone, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a single parameter array.
/// `t` is the 1-based step count at which this update happens.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    cfg: &AdamConfig,
) {
    debug_assert!(t >= 1);
    let b1c = 1.0 - cfg.beta1.powi(t as i32);
    let b2c = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / b1c;
        let vhat = v[i] / b2c;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Per-parameter first/second moments plus the shared step counter for one
/// [`ParamStore`]. Construct against the store it will update.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| {
                if e.trainable {
                    vec![0.0; e.data.len()]
                } else {
                    Vec::new()
                }
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        OptimizerState { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must align with the store's entries, with
    /// `Some` for every trainable entry (as produced by `Binding::grads`).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(GradError::InvalidArg {
                op: "adam_step",
                detail: format!(
                    "{} gradient slots for {} parameters",
                    grads.len(),
                    store.len()
                ),
            });
        }
        self.step += 1;
        for idx in 0..store.len() {
            if !store.entries()[idx].trainable {
                continue;
            }
            let name = store.entries()[idx].name.clone();
            let g = grads[idx]
                .as_ref()
                .ok_or(GradError::MissingGrad { name: name.clone() })?;
            if g.len() != store.entries()[idx].data.len() {
                return Err(GradError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: gradient length {}", g.len()),
                });
            }
            let entry = &mut store.entries[idx];
            adam_update(
                &mut entry.data,
                g,
                &mut self.m[idx],
                &mut self.v[idx],
                self.step,
                &self.cfg,
            );
        }
        Ok(())
    }
}
