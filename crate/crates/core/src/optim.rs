//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decay rates must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("weight decay must be non-negative and eps positive".into()));
        }
        Ok(())
    }
}

pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient; parameters that did not
    /// take part in the pass are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, vars: &BTreeMap<String, Var>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        for (name, p) in params.params_mut() {
            let Some(g) = vars.get(name).and_then(|&v| grads.get(v)) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let (md, vd, pd, gd) = (m.data_mut(), v.data_mut(), p.data_mut(), g.data());
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (T::one() - b1) * gd[i];
                vd[i] = b2 * vd[i] + (T::one() - b2) * gd[i] * gd[i];
                let mh = md[i] / T::lit(bc1);
                let vh = vd[i] / T::lit(bc2);
                pd[i] = pd[i] * decay - lr * mh / (vh.sqrt() + T::lit(c.eps));
            }
        }
    }
}
