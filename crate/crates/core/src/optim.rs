//! Adam optimizer over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tgc_tensor::ParamStore;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from summed-and-averaged gradients. Only names
    /// present in `grads` are touched; frozen parameters never appear there
    /// because backward skips them.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            if !param.trainable {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= (self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("train.x", vec![2], vec![3.0, -2.0]).unwrap();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            let p = store.get("train.x").unwrap();
            let grads: BTreeMap<String, Vec<f64>> = [(
                "train.x".to_string(),
                p.data.iter().map(|&x| 2.0 * x as f64).collect(),
            )]
            .into();
            adam.step(&mut store, &grads);
        }
        for &x in &store.get("train.x").unwrap().data {
            assert!(x.abs() < 1e-2, "did not converge: {x}");
        }
    }

    #[test]
    fn frozen_params_are_never_touched() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("frozen.vit.w", vec![1], vec![1.5]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let grads: BTreeMap<String, Vec<f64>> =
            [("frozen.vit.w".to_string(), vec![10.0])].into();
        adam.step(&mut store, &grads);
        assert_eq!(store.get("frozen.vit.w").unwrap().data[0], 1.5);
    }
}
