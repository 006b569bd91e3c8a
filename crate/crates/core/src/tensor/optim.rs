//! Adam with a staircase exponential learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay: f64,
    pub decay_interval: u64,
    pub staircase: bool,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            decay: 0.99,
            decay_interval: 100,
            staircase: true,
        }
    }
}

/// Learning rate in effect at (zero-based) optimizer step `step`.
pub fn lr_at(step: u64, sched: &LrSchedule) -> f64 {
    let interval = sched.decay_interval.max(1) as f64;
    let exponent = if sched.staircase {
        (step / sched.decay_interval.max(1)) as f64
    } else {
        step as f64 / interval
    };
    sched.base_lr * sched.decay.powf(exponent)
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    /// Number of updates applied so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    /// One bias-corrected Adam update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                let gv = gv as f64;
                let m_new = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gv;
                let v_new = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gv * gv;
                *mv = m_new as f32;
                *vv = v_new as f32;
                let m_hat = m_new / c1;
                let v_hat = v_new / c2;
                *pv = (*pv as f64 - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Adam driven by a learning-rate schedule.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub state: AdamState,
    pub schedule: LrSchedule,
}

impl Adam {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            state: AdamState::default(),
            schedule,
        }
    }

    /// Applies one update at the learning rate of the current step; returns it.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>) -> f64 {
        let lr = lr_at(self.state.t, &self.schedule);
        self.state.step(params, grads, lr);
        lr
    }
}
