use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept in `f64` whatever the
/// parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(cfg: AdamConfig, store: &ParamStore<S>) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {cfg:?}")));
        }
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Ok(Adam { cfg, step: 0, m: zeros(), v: zeros() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from gradients aligned with the store's tensors.
    /// Non-trainable entries are skipped.
    pub fn update<S: Scalar>(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient {i} has {} entries, parameter has {}", g.len(), p.len())));
            }
            for j in 0..p.len() {
                let gj = g[j].to_f64_lossy();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                p[j] = S::lit(p[j].to_f64_lossy() - step);
            }
        }
        Ok(())
    }
}
