//! Adam with coupled L2 weight decay and a cosine schedule with warm restarts.

use std::collections::BTreeMap;

use crate::nn::ParamStore;
use crate::tensor::Array;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 2e-4 }
    }
}

struct Moments {
    m: Array,
    v: Array,
    steps: u64,
}

/// Per-parameter Adam state. Parameters without a gradient in a step are
/// left untouched, including their decay and bias-correction counters.
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        let c = self.config.clone();
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                return Err(Error::Mismatch(format!("gradient for unknown parameter `{name}`")));
            };
            if p.shape() != g.shape() {
                return Err(Error::Mismatch(format!("gradient shape {:?} for `{name}` {:?}", g.shape(), p.shape())));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Array::zeros(p.raw_dim()),
                v: Array::zeros(p.raw_dim()),
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            ndarray::Zip::from(&mut *p).and(&mut st.m).and(&mut st.v).and(g).for_each(|p, m, v, &g| {
                let g = g + c.weight_decay * *p;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let denom = (*v / bc2).sqrt() + c.eps;
                *p -= lr * (*m / bc1) / denom;
            });
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts; `cycle_epochs` is the first cycle
/// length and each later cycle is `cycle_mult` times longer.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineRestarts {
    pub base_lr: f64,
    pub min_lr: f64,
    pub cycle_epochs: f64,
    pub cycle_mult: f64,
}

impl CosineRestarts {
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let (mut t, mut len) = (epoch.max(0.0), self.cycle_epochs.max(f64::MIN_POSITIVE));
        while t >= len {
            t -= len;
            len *= self.cycle_mult.max(1.0);
        }
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t / len).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Array::from_elem(IxDyn(&[3]), 1.0));
        params.insert("frozen", Array::from_elem(IxDyn(&[2]), 5.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::from_elem(IxDyn(&[3]), 0.5));
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        adam.step(&mut params, &grads, 0.1).unwrap();
        for &v in params.get("w").unwrap() {
            assert!((v - 0.9).abs() < 1e-6);
        }
        assert!(params.get("frozen").unwrap().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineRestarts { base_lr: 2e-4, min_lr: 2e-6, cycle_epochs: 50.0, cycle_mult: 1.0 };
        assert!((s.lr_at(0.0) - 2e-4).abs() < 1e-18);
        assert!((s.lr_at(25.0) - 1.01e-4).abs() < 1e-12);
        assert!(s.lr_at(49.999) < 2.1e-6);
        assert!((s.lr_at(50.0) - 2e-4).abs() < 1e-18);
    }
}
