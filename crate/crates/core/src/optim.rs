//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::{ParamRegistry, Tag};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply the decay term to trainable parameters that received no
    /// gradient this step.
    pub decay_without_grad: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_without_grad: false,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", config.lr)));
        }
        Ok(OptimState { config, step: 0, moments: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every trainable parameter. Gradients naming a frozen or
    /// unknown parameter, or with a mismatched shape, are rejected before any
    /// value changes.
    pub fn step<F: Real>(&mut self, params: &mut ParamRegistry, grads: &Gradients<F>) -> Result<()> {
        for (name, g) in grads.params() {
            let p = params.get(name)?;
            if p.tag == Tag::Frozen {
                return Err(Error::FrozenParam(name.clone()));
            }
            if p.value.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("`{name}` is {:?}, gradient is {:?}", p.value.shape(), g.shape()),
                ));
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for name in params.names(Tag::Trainable) {
            let grad = grads.param(&name);
            if grad.is_none() && !c.decay_without_grad {
                continue;
            }
            let value = params.trainable_mut(&name)?;
            let n = value.len();
            let mom = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let data = value.data_mut();
            for v in data.iter_mut() {
                *v -= c.lr * c.weight_decay * *v;
            }
            let Some(grad) = grad else { continue };
            for (i, gv) in grad.data().iter().enumerate() {
                let gv = gv.f64();
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gv;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gv * gv;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
