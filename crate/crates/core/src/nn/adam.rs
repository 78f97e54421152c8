use serde::{Deserialize, Serialize};

use super::params::{Param, ParamStore};

/// Adam with coupled L2 weight decay (the decay term is added to the
/// gradient before the moment updates).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter step counts and moments, indexed like the store.
    pub steps: Vec<u64>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: vec![0; store.len()],
            m: store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// One update of every parameter selected by `trainable`. Unselected
    /// parameters and their moments are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, trainable: impl Fn(&Param) -> bool) {
        for (i, p) in store.iter_mut().enumerate() {
            if !trainable(p) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((theta, &g), (mi, vi)) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g as f64 + wd * *theta as f64;
                let mn = self.beta1 * *mi as f64 + (1.0 - self.beta1) * g;
                let vn = self.beta2 * *vi as f64 + (1.0 - self.beta2) * g * g;
                *mi = mn as f32;
                *vi = vn as f32;
                let upd = lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *theta = (*theta as f64 - upd) as f32;
            }
        }
    }
}
