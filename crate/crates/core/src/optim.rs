//! Adam with bias correction, keyed by parameter name.
//!
//! Moment buffers appear lazily the first time a parameter receives a
//! gradient. Frozen parameters are never touched, even if a gradient is
//! handed in for them. Update order follows the gradient list, so a
//! deterministic caller yields bit-identical runs.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::{sc, Scalar};

pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    m: HashMap<String, Vec<S>>,
    v: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Adam {
            lr,
            beta1: sc(0.9),
            beta2: sc(0.999),
            eps: sc(1e-8),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update over `grads`. Entries for frozen parameters are
    /// skipped; unknown names and shape mismatches are errors.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(String, Vec<S>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            if p.data.len() != g.len() {
                return Err(CoreError::InvalidShape {
                    op: "adam_step",
                    shape: vec![g.len()],
                    msg: format!("gradient for {name:?} wants {} elements", p.data.len()),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
