//! AdamW with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.round_to_f32();
        }
    }
}

impl AdamW {
    /// One optimizer step. Parameters without a gradient still receive decay.
    pub fn step(&self, store: &mut ParamStore, grads: &Grads, state: &mut AdamWState) -> Result<()> {
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(TensorError::Invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !grads.is_finite() {
            return Err(TensorError::NonFinite { op: "adamw" });
        }
        if state.m.len() != store.len() || grads.len() != store.len() {
            return Err(TensorError::Invalid("optimizer state does not match parameters".into()));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = store.get(id).decay;
            let theta = store.value_mut(id);
            let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
            if m.shape() != theta.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    lhs: theta.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
            let g = grads.get(id);
            if let Some(g) = g {
                if g.shape() != theta.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adamw",
                        lhs: theta.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            let shrink = if decay { 1.0 - self.lr * self.weight_decay } else { 1.0 };
            let td = theta.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..td.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                td[i] = td[i] * shrink - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
