//! Adam and global-norm gradient clipping over a `ParamStore`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::Config(
                "adam betas must be in [0, 1) and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Gradients of the parameters selected by `trainable` (zeros when a
/// parameter took no part in the loss).
pub fn collect_grads(
    store: &ParamStore,
    grads: &Gradients,
    trainable: impl Fn(&str) -> bool,
) -> BTreeMap<String, Vec<f64>> {
    store
        .iter()
        .filter(|p| trainable(p.name()))
        .map(|p| {
            let v = p.value();
            let g = grads
                .get(&v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; v.numel()]);
            (p.name().to_string(), g)
        })
        .collect()
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter named in `grads`; updated parameters
    /// are tracked leaves.
    pub fn update(
        &mut self,
        store: &ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = store
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let name = name.clone();
            let value = p.value();
            let n = value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            let mut next = value.to_vec();
            for i in 0..n {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                next[i] -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            }
            p.set(Tensor::new(next, value.shape())?.into_var())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ParamBuilder::new(&mut store, &mut rng).param("w", &[3], Init::Ones);
        store.set_trainable(true);
        let grads = BTreeMap::from([("w".to_string(), vec![2.0, -0.5, 0.0])]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        Adam::new().update(&store, &grads, &cfg).unwrap();
        let v = p.value().to_vec();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] - 1.1).abs() < 1e-6);
        assert_eq!(v[2], 1.0);
        assert!(p.value().is_tracked());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ParamBuilder::new(&mut store, &mut rng).param("w", &[2], Init::Normal(1.0));
        store.set_trainable(true);
        let target = Tensor::new(vec![3.0, -2.0], &[2]).unwrap();
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new();
        for _ in 0..1000 {
            let loss = p
                .value()
                .sub(&target)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap();
            let g = collect_grads(&store, &loss.backward().unwrap(), |_| true);
            opt.update(&store, &g, &cfg).unwrap();
        }
        let v = p.value().to_vec();
        assert!(
            (v[0] - 3.0).abs() < 1e-3 && (v[1] + 2.0).abs() < 1e-3,
            "{v:?}"
        );
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = BTreeMap::from([("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["a"], vec![3.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
