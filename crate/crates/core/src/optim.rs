//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::arg("Adam betas must lie in [0,1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::arg("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Ok(Adam { cfg, m: zeros(), v: zeros(), t: 0 })
    }

    /// One update; `grads[i]` is `None` for parameters that received no gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::dim("gradient list does not match the parameter store"));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.value_at_mut(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            match g {
                Some(g) => {
                    if g.shape() != p.shape() {
                        return Err(Error::dim(format!("gradient shape {:?} for {:?}", g.shape(), p.shape())));
                    }
                    for k in 0..p.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g.data()[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g.data()[k] * g.data()[k];
                    }
                }
                None => {
                    m.iter_mut().for_each(|x| *x *= beta1);
                    v.iter_mut().for_each(|x| *x *= beta2);
                }
            }
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                *x -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
