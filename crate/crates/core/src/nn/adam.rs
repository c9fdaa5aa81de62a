use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::nn::{scalar, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self { learning_rate, beta1, beta2, eps: default_eps() }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state can be checkpointed next to the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradients present for `params`.
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    /// With `clip = Some(c)` gradients are rescaled to global norm at most `c`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, clip: Option<f64>) -> Result<()> {
        let scale = match clip {
            Some(c) => {
                let norm = Self::grad_norm(params, grads)?;
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g.clone() };
            let m = match self.first.get(name) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let m_hat = (&m / correction1)?;
            let v_hat = (&v / correction2)?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let updated = (var.as_tensor() - (delta * learning_rate)?)?;
            var.set(&updated)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, out: &mut HashMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.first {
            out.insert(format!("{prefix}m/{k}"), v.copy()?);
        }
        for (k, v) in &self.second {
            out.insert(format!("{prefix}v/{k}"), v.copy()?);
        }
        Ok(())
    }

    pub fn import(&mut self, prefix: &str, step: u64, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (key, t) in tensors {
            let Some(rest) = key.strip_prefix(prefix) else { continue };
            if let Some(name) = rest.strip_prefix("m/") {
                self.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = rest.strip_prefix("v/") {
                self.second.insert(name.to_string(), t.clone());
            } else {
                return Err(DclError::Checkpoint(format!("unexpected optimizer entry {key}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let dev = Device::Cpu;
        let mut params = ParamStore::new();
        let w = params.insert("w", Tensor::new(&[1.0f64, -2.0, 3.0], &dev).unwrap()).unwrap();
        let loss = (w.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.1, 0.9, 0.999));
        adam.step(&params, &grads, None).unwrap();
        // m_hat / sqrt(v_hat) = sign(g) on the first step.
        let after: Vec<f64> = params.get("w").unwrap().to_vec1().unwrap();
        let expected = [0.9, -1.9, 2.9];
        for (a, e) in after.iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let dev = Device::Cpu;
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(&[5.0f64, -3.0], &dev).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.05, 0.9, 0.999));
        for _ in 0..500 {
            let w = params.get("w").unwrap().clone();
            let loss = w.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            adam.step(&params, &grads, Some(10.0)).unwrap();
        }
        let w: Vec<f64> = params.get("w").unwrap().to_vec1().unwrap();
        assert!(w.iter().all(|v| v.abs() < 0.05), "{w:?}");
    }
}
