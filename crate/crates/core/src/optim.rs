//! Adam with a linear warmup / linear decay schedule and per-group peak rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear ramp from 0 to 1 over the first `warmup_steps`, then linear decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupLinearSchedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl WarmupLinearSchedule {
    pub fn new(total_steps: u64, warmup_proportion: f64) -> Self {
        let warmup_steps = (warmup_proportion * total_steps as f64).ceil() as u64;
        WarmupLinearSchedule {
            total_steps,
            warmup_steps,
        }
    }

    /// Multiplier on the peak learning rate at `position` (0-based step).
    pub fn factor(&self, position: u64) -> f64 {
        if position < self.warmup_steps {
            return position as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return 1.0;
        }
        let remaining = self.total_steps.saturating_sub(position) as f64;
        (remaining / (self.total_steps - self.warmup_steps) as f64).clamp(0.0, 1.0)
    }
}

/// First and second moment buffers, one per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: u64,
    initialized: bool,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.len()])
            .collect();
        AdamState {
            v: m.clone(),
            m,
            steps: 0,
            initialized: true,
        }
    }

    pub fn from_parts(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, steps: u64) -> Self {
        AdamState {
            m,
            v,
            steps,
            initialized: true,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

/// Per-group peak learning rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub encoder: f64,
    pub rest: f64,
}

impl GroupRates {
    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Rest => self.rest,
        }
    }
}

/// One Adam update at schedule `position` using gradients stored on the parameters.
///
/// Frozen parameters are skipped entirely. Returns the effective rates used.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
    peaks: GroupRates,
    schedule: &WarmupLinearSchedule,
    position: u64,
) -> Result<GroupRates> {
    if !state.initialized {
        return Err(Error::contract(
            "adam_step called with uninitialized optimizer state",
        ));
    }
    if state.m.len() != store.len() {
        return Err(Error::contract(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    let f = schedule.factor(position);
    let rates = GroupRates {
        encoder: peaks.encoder * f,
        rest: peaks.rest * f,
    };
    state.steps += 1;
    let t = state.steps as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        let lr = rates.for_group(p.group);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, g), mm), vv) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(&p.grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mm = cfg.beta1 * *mm + (1.0 - cfg.beta1) * g;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * g * g;
            let mhat = *mm / bc1;
            let vhat = *vv / bc2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(rates)
}
