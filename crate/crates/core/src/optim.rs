//! Adam with bias correction, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Scales every gradient by `max_norm / g` when the global norm `g` exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, aligned with the store's parameters.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update from the accumulated gradients, which are then zeroed.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data_mut();
            let values = p.value.data_mut();
            for (((w, g), m), v) in values.iter_mut().zip(grads.iter_mut()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * *g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * *g * *g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *g = 0.0;
            }
        }
    }

    /// Checks that the moments line up with `store`, e.g. after loading a checkpoint.
    pub fn check_against(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::CheckpointMismatch(format!("optimizer moment shape differs for {}", p.name)));
            }
        }
        Ok(())
    }
}
