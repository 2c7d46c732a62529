//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};
use crate::scalar::{s, Scalar};

/// Hyper-parameters. Defaults: `lr 5e-4`, betas `(0.9, 0.999)`,
/// `eps 1e-8`, `weight_decay 0.01`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::domain(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::domain(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::domain("eps must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::domain("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// First/second moment accumulators plus the step counter used for bias
/// correction. Shapes mirror the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: ModelParameters<S>,
    pub v: ModelParameters<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState { m: ModelParameters::zeros(cfg), v: ModelParameters::zeros(cfg), step: 0 }
    }

    /// One update: decoupled decay `p *= 1 - lr*wd`, then the
    /// bias-corrected Adam step from `grads`.
    pub fn apply(
        &mut self,
        params: &mut ModelParameters<S>,
        grads: &ModelParameters<S>,
        cfg: &AdamWConfig,
    ) -> Result<()> {
        cfg.validate()?;
        self.step += 1;
        let lr = s::<S>(cfg.lr);
        let b1 = s::<S>(cfg.beta1);
        let b2 = s::<S>(cfg.beta2);
        let eps = s::<S>(cfg.eps);
        let one = S::one();
        let decay = one - lr * s::<S>(cfg.weight_decay);
        let bc1 = one - s::<S>(cfg.beta1.powi(self.step as i32));
        let bc2 = one - s::<S>(cfg.beta2.powi(self.step as i32));

        let pt = params.tensors_mut();
        let gt = grads.tensors();
        let mt = self.m.tensors_mut();
        let vt = self.v.tensors_mut();
        if pt.len() != gt.len() {
            return Err(Error::contract("gradient tensor list does not match parameters"));
        }
        for (((p, gr), m), v) in pt.into_iter().zip(gt).zip(mt).zip(vt) {
            debug_assert_eq!(p.0, gr.0, "tensor order mismatch");
            if p.1.len() != gr.1.len() {
                return Err(Error::contract(format!("tensor {} shape mismatch", p.0)));
            }
            for i in 0..p.1.len() {
                let g = gr.1[i];
                p.1[i] *= decay;
                m.1[i] = b1 * m.1[i] + (one - b1) * g;
                v.1[i] = b2 * v.1[i] + (one - b2) * g * g;
                let mhat = m.1[i] / bc1;
                let vhat = v.1[i] / bc2;
                p.1[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
