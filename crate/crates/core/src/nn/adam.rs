//! ADAM optimizer with bias correction.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Adam {
            cfg,
            step: 0,
            m: params.values().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.values().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    /// Apply one update. Gradients must align with the param set's
    /// registration order. NaN/Inf gradients abort with a numerical error.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "got {} gradients for {} params",
                grads.len(),
                self.m.len()
            )));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .values_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            m.zip_mut_with(g, |mv, &gv| *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| {
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv
            });
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            });
        }
        Ok(())
    }
}
