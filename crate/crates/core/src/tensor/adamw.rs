use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Moments are allocated lazily on the first step and must keep matching
/// the parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: AdamWConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Restores optimizer state saved by [`AdamW::moments`].
    pub fn from_state(hyper: AdamWConfig, step_count: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::dim("AdamW state: first and second moments disagree"));
        }
        Ok(Self {
            hyper,
            step_count,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one update using the gradients stored on `params`, replacing
    /// each parameter with a fresh leaf. A parameter without a gradient is
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::dim(format!(
                "AdamW tracks {} tensors but got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::dim(format!(
                    "AdamW moment {i} has {} entries but parameter has {}",
                    self.m[i].len(),
                    p.numel()
                )));
            }
        }
        self.step_count += 1;
        let h = self.hyper;
        let t = self.step_count as f64;
        let bc1 = 1.0 - h.beta1.powf(t);
        let bc2 = 1.0 - h.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad();
            let mut data = p.data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                data[j] *= 1.0 - h.lr * h.weight_decay;
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g;
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= h.lr * mhat / (vhat.sqrt() + h.eps);
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("AdamW update".into()));
            }
            **p = Tensor::param(data, p.shape())?;
        }
        Ok(())
    }
}
