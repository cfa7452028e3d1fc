//! Warmup-plus-cosine learning rate and SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::error::{DipError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub warmup_steps: usize,
    /// Step at which the cosine phase reaches zero.
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn from_epochs(lr0: f64, warmup_epochs: usize, epochs: usize, steps_per_epoch: usize) -> Self {
        LrSchedule { lr0, warmup_steps: warmup_epochs * steps_per_epoch, total_steps: epochs * steps_per_epoch }
    }

    /// Linear from `lr0 / 10` to `lr0` over the warmup, then cosine to 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let start = self.lr0 / 10.0;
        if step < self.warmup_steps {
            return start + (self.lr0 - start) * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return if step >= self.total_steps { 0.0 } else { self.lr0 };
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.lr0 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// `v = momentum * v + g; p -= lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64) -> Self {
        Sgd { momentum, velocity: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    /// Applies one update; `grads[i]` is `None` for parameters without a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(DipError::shape("sgd", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        for (id, g) in grads.iter().enumerate() {
            let v = &mut self.velocity[id];
            match g {
                Some(g) => {
                    for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                        *vv = mu * *vv + gv;
                    }
                }
                None => {
                    for vv in v.data_mut() {
                        *vv = mu * *vv;
                    }
                }
            }
            for (p, &vv) in store.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vv;
            }
        }
        Ok(())
    }
}
