//! Adam with bias correction and the StepLR schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update using the gradients currently held in
    /// `params`. Refuses to touch a frozen set.
    pub fn step(&mut self, params: &mut ParameterSet, lr: f64) -> Result<()> {
        if params.is_frozen() {
            return Err(Error::Frozen);
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let t = params.get_mut(&name)?;
            let n = t.numel();
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = self.moments.entry(name).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = t.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step-decayed learning rate: `base_lr * gamma^floor(epoch / step_size)`.
pub fn steplr(epoch: usize, base_lr: f64, step_size: usize, gamma: f64) -> Result<f64> {
    if step_size == 0 {
        return Err(Error::InvalidArgument("StepLR step_size must be at least 1".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("StepLR gamma {gamma} outside (0, 1]")));
    }
    Ok(base_lr * gamma.powi((epoch / step_size) as i32))
}
