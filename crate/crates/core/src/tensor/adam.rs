use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Bias-corrected Adam over named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every `(name, param)` that has a gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let t = self.t + 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(t as f64);
        let bc2 = 1.0 - beta2.powf(t as f64);
        // Validate first so a failed step leaves every parameter untouched.
        let mut work = Vec::new();
        for (name, param) in params {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != param.shape() {
                return Err(TensorError::Usage(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            if let Some(mo) = self.moments.get(name) {
                if mo.m.shape() != param.shape() || mo.v.shape() != param.shape() {
                    return Err(TensorError::Usage(format!(
                        "optimizer state for {name} has shape {:?}, parameter {:?}",
                        mo.m.shape(),
                        param.shape()
                    )));
                }
            }
            work.push((name, param, g));
        }
        for (name, param, g) in work {
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
            });
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        self.t = t;
        Ok(())
    }
}
