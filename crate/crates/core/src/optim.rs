//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{FiaError, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step count.
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    /// Restores state captured from [`AdamW::moments`] and [`AdamW::step_count`].
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, (Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments;
    }

    /// Applies one update to every parameter accepted by `trainable` that
    /// received a gradient. Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, var) in store.iter() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - c.lr * c.weight_decay))?;
            let next = (decayed - (update * c.lr)?)?;
            if !all_finite(&next)? {
                return Err(FiaError::Divergence(format!(
                    "non-finite value in parameter {name} after step {}",
                    self.step
                )));
            }
            var.set(&next)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(candle_core::DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}
