use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::learning::{Grads, Params, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Zero gives Adam; positive values give decoupled (AdamW) decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad optimizer config {self:?}")))
        }
    }
}

/// Bias-corrected Adam with optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every parameter selected by `trainable`; each must have a gradient.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &Grads,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, value) in params.iter() {
            if !trainable(name) {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            if g.shape() != value.shape() {
                return Err(Error::dim(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    value.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, value) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let g = &grads[name.as_str()];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let iter = value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &gi), (mi, vi)) in iter {
                if weight_decay > 0.0 {
                    *p -= lr * weight_decay * *p;
                }
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
