//! AdamW with per-tensor skipping of frozen parameters.

use crate::model::{ParamGrads, ParamStore};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Updates applied so far, per tensor (for bias correction).
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: vec![0; store.len()],
        }
    }

    /// One step on the tensors with `active[i]`; inactive tensors keep their
    /// values and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, active: &[bool], lr: f64) {
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            if !active[i] {
                continue;
            }
            self.t[i] += 1;
            let bc1 = 1.0 - self.beta1.powi(self.t[i] as i32);
            let bc2 = 1.0 - self.beta2.powi(self.t[i] as i32);
            let g = grads.0[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
    }
}
