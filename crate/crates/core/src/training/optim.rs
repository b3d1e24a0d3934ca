use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::denoiser::Params;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are kept by parameter name so
/// they can be written to and restored from checkpoints.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: OptimizerConfig, learning_rate: f64, params: &Params) -> Result<Self> {
        let OptimizerConfig::Adam { beta1, beta2, eps } = config;
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in params.iter() {
            first.insert(name.clone(), var.zeros_like()?);
            second.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(params: &Params, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var) {
                total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// One update. Gradients are multiplied by `grad_scale` first (used for
    /// norm clipping).
    pub fn apply(&mut self, params: &Params, grads: &GradStore, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var) else { continue };
            let g = if grad_scale != 1.0 { (g * grad_scale)? } else { g.clone() };
            let m = self
                .first
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("no optimizer state for `{name}`")))?;
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = self.second.get_mut(name).expect("paired moment buffers");
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.learning_rate)?)?)?;
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` for serialization.
    pub fn state(&self) -> impl Iterator<Item = (&String, &Tensor, &Tensor)> {
        self.first
            .iter()
            .map(move |(name, m)| (name, m, &self.second[name]))
    }

    pub fn restore(
        &mut self,
        step: u64,
        first: BTreeMap<String, Tensor>,
        second: BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, m) in &self.first {
            let check = |map: &BTreeMap<String, Tensor>| -> Result<()> {
                match map.get(name) {
                    Some(t) if t.dims() == m.dims() => Ok(()),
                    Some(t) => Err(Error::Checkpoint(format!(
                        "optimizer state `{name}` is {:?}, expected {:?}",
                        t.dims(),
                        m.dims()
                    ))),
                    None => Err(Error::Checkpoint(format!("missing optimizer state `{name}`"))),
                }
            };
            check(&first)?;
            check(&second)?;
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }
}

/// Moves `ema` toward `live`: ema ← ema + (1 − decay)(live − ema).
pub fn ema_update(ema: &Params, live: &Params, decay: f64) -> Result<()> {
    for (name, shadow) in ema.iter() {
        let w = live
            .get(name)
            .ok_or_else(|| Error::Shape(format!("EMA parameter `{name}` has no live counterpart")))?;
        let delta = ((w.as_tensor() - shadow.as_tensor())? * (1.0 - decay))?;
        shadow.set(&(shadow.as_tensor() + delta)?)?;
    }
    Ok(())
}
