//! Adam with bias correction and a step learning-rate schedule, updating
//! parameters in place through the store (which clamps to bounds).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::ParameterStore;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptimError {
    #[error("gradient for unknown parameter `{0}`")]
    Unknown(String),
    #[error("gradient for frozen parameter `{0}`")]
    Frozen(String),
}

/// Optimizer state: per-parameter moment estimates plus the schedule.
/// Moments appear lazily, keyed like the unfrozen store entries.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Base learning rate; decayed by the step schedule.
    pub lr: f64,
    pub gamma: f64,
    pub step_size: usize,
    t: u64,
    m: BTreeMap<String, f64>,
    v: BTreeMap<String, f64>,
}

impl AdamState {
    pub fn new(lr: f64, gamma: f64, step_size: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            gamma,
            step_size,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Learning rate for an epoch: `lr * gamma^(epoch / step_size)`.
    pub fn scheduled_lr(&self, epoch: usize) -> f64 {
        self.lr * self.gamma.powi((epoch / self.step_size) as i32)
    }

    /// One Adam update at learning rate `lr` (pass [`Self::scheduled_lr`] of
    /// the current epoch). Bounds are enforced by clamping after the step;
    /// moments are left untouched by the projection.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, f64>,
        params: &mut ParameterStore,
        lr: f64,
    ) -> Result<(), OptimError> {
        for name in grads.keys() {
            match params.entry(name) {
                None => return Err(OptimError::Unknown(name.clone())),
                Some(e) if e.frozen => return Err(OptimError::Frozen(name.clone())),
                Some(_) => {}
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut deltas = BTreeMap::new();
        for (name, &g) in grads {
            let m = self.m.entry(name.clone()).or_insert(0.0);
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            let v = self.v.entry(name.clone()).or_insert(0.0);
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            deltas.insert(name.clone(), -lr * m_hat / (v_hat.sqrt() + self.eps));
        }
        params
            .apply_update(&deltas)
            .expect("delta names validated against the store");
        Ok(())
    }
}
