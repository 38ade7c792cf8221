//! AdamW with decoupled weight decay and the poly learning-rate schedule.

use std::collections::BTreeMap;

use crate::autograd::Array;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// `lr0 * (1 - iter / total)^power`, with `iter` clamped to `[0, total]`.
pub fn poly_lr(iter: u64, total_iters: u64, lr0: f64, power: f64) -> f64 {
    if total_iters == 0 {
        return lr0;
    }
    let frac = (iter.min(total_iters) as f64) / total_iters as f64;
    lr0 * (1.0 - frac).powf(power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient in `grads`.
    /// Frozen parameters are never touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invariant(format!("gradient for unknown parameter `{name}`")))?;
            if !p.trainable {
                return Err(Error::invariant(format!("gradient for frozen parameter `{name}`")));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::invariant(format!("gradient shape mismatch for `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array::zeros(g.raw_dim()));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
                });
        }
        Ok(())
    }
}
