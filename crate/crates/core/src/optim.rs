//! AdamW with decoupled weight decay. State exists only for parameters that
//! have been stepped, so frozen tensors never get slots.

use std::collections::BTreeMap;

use crate::autograd::Tensor;
use crate::error::{ensure, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, grad) in grads {
            let Some(theta) = params.get_mut(name) else {
                return Err(crate::error::Error::Contract(format!("gradient for unknown parameter {name}")));
            };
            ensure!(
                theta.shape() == grad.shape(),
                "gradient shape {:?} differs from parameter {name} {:?}",
                grad.shape(),
                theta.shape()
            );
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            let (Some(p), Some(m), Some(v), Some(g)) =
                (theta.as_slice_mut(), m.as_slice_mut(), v.as_slice_mut(), grad.as_slice())
            else {
                return Err(crate::error::Error::Contract(format!("non-contiguous tensor for {name}")));
            };
            for i in 0..p.len() {
                let gi = g[i];
                p[i] -= lr * weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.insert("w", arr1(&[1.0, -2.0, 3.0]).into_dyn());
        p.insert("frozen", arr1(&[5.0]).into_dyn());
        let mut opt = AdamW::new(AdamConfig::new(0.1, 0.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), arr1(&[0.5, -4.0, 0.0]).into_dyn());
        opt.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
        assert_eq!(p.get("frozen").unwrap()[0], 5.0);
        assert!(!opt.state.m.contains_key("frozen"));
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_elem(IxDyn(&[2]), 2.0));
        let mut opt = AdamW::new(AdamConfig::new(0.1, 0.5));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::zeros(IxDyn(&[2])));
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap()[0] - 1.9).abs() < 1e-12);
    }
}
