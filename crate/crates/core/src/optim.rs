//! Adam with decoupled weight decay and the plateau learning-rate schedule.

use crate::error::{HglError, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One update from the gradients accumulated in `store`:
///
/// ```text
/// m ← β1 m + (1−β1) g
/// v ← β2 v + (1−β2) g²
/// w ← w − lr · m̂ / (√v̂ + ε) − lr · wd · w
/// ```
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(HglError::Contract(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let grad = store.grad(id).clone();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let w = store.value_mut(id).data_mut();
        if grad.len() != w.len() || m.len() != w.len() {
            return Err(HglError::Contract(format!("gradient shape mismatch for parameter {k}")));
        }
        for i in 0..w.len() {
            let g = grad.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            let decay = cfg.learning_rate * cfg.weight_decay * w[i];
            w[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps) + decay;
        }
    }
    Ok(())
}

/// Halves the rate once validation accuracy has failed to strictly improve
/// for `patience` consecutive epochs. The counter restarts after every
/// improvement and after every reduction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauSchedule {
            patience,
            factor,
            best: None,
            stale: 0,
        }
    }

    /// Feeds one epoch's accuracy; returns whether the rate should drop now.
    pub fn observe(&mut self, accuracy: f64) -> bool {
        match self.best {
            Some(b) if accuracy <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.stale = 0;
                    return true;
                }
            }
            _ => {
                self.best = Some(accuracy);
                self.stale = 0;
            }
        }
        false
    }
}

/// Replays `history` through a fresh schedule and returns the rate to use
/// after its last entry: `current_lr · factor` if a reduction fires on that
/// entry, otherwise `current_lr`.
pub fn lr_schedule(history: &[f64], current_lr: f64, patience: usize, factor: f64) -> f64 {
    let mut s = PlateauSchedule::new(patience, factor);
    let mut fired = false;
    for &a in history {
        fired = s.observe(a);
    }
    if fired {
        current_lr * factor
    } else {
        current_lr
    }
}
