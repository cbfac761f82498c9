use super::{Grads, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BASE_LR: f64 = 5e-3;
pub const LR_DECAY: f64 = 0.9;

/// lr = 5e-3 · 0.9^epoch.
pub fn lr_schedule(epoch: usize) -> f64 {
    BASE_LR * LR_DECAY.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. Fails before touching anything if a
    /// gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        for id in params.ids() {
            let g = grads.get(id);
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape(format!("gradient shape for {}", params.name(id))));
            }
            if let Some(bad) = g.data().iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} is {bad}", params.name(id))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in params.ids() {
            let k = id.index();
            let g = grads.get(id).data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
