//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::NumericsError;
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter, in sorted name order. `grads` must
    /// cover each parameter with a matching shape (zeros for parameters that
    /// sat out the loss).
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), NumericsError> {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (name, param) in params.iter_mut() {
            let grad = grads.get(name).ok_or_else(|| NumericsError::Invalid {
                op: "adam_step",
                details: format!("missing gradient for {name:?}"),
            })?;
            if grad.shape() != param.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    details: format!(
                        "{name:?}: param {:?} vs grad {:?}",
                        param.shape(),
                        grad.shape()
                    ),
                });
            }
            let n = param.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = param.data_mut();
            let g = grad.data();
            for i in 0..n {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            if !param.is_finite() {
                return Err(NumericsError::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}
