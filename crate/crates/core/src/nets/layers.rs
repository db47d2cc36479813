use rand::Rng;

use super::Parameters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Number of sinusoid frequencies in the time embedding.
pub const TIME_FREQS: usize = 8;
/// Width of the time embedding (a sine and a cosine per frequency).
pub const TIME_FEATURES: usize = 2 * TIME_FREQS;

/// `y = x · W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: Tensor::randn(&[fan_in, fan_out], std, rng)?.as_param()?,
            bias: Tensor::param(vec![0.0; fan_out], &[fan_out])?,
        })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: Tensor::param(vec![0.0; fan_in * fan_out], &[fan_in, fan_out])?,
            bias: Tensor::param(vec![0.0; fan_out], &[fan_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Parameters for Linear {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::param(vec![1.0; dim], &[dim])?,
            beta: Tensor::param(vec![0.0; dim], &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

impl Parameters for LayerNorm {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Sinusoidal features of `t`: frequencies spaced geometrically from 1 to
/// 64, sines first then cosines. Shape `[t.len(), TIME_FEATURES]`.
pub fn time_features(t: &[f64]) -> Result<Tensor> {
    if t.is_empty() {
        return Err(Error::dim("time_features of an empty batch"));
    }
    let freqs: Vec<f64> = (0..TIME_FREQS)
        .map(|i| 64f64.powf(i as f64 / (TIME_FREQS - 1) as f64))
        .collect();
    let mut data = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        data.extend(freqs.iter().map(|f| (f * ti).sin()));
        data.extend(freqs.iter().map(|f| (f * ti).cos()));
    }
    Tensor::new(data, &[t.len(), TIME_FEATURES])
}

pub(crate) fn check_times(t: &[f64], rows: usize) -> Result<()> {
    if t.len() != rows {
        return Err(Error::dim(format!("{} times for {rows} rows", t.len())));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract(format!("time {bad} outside [0, 1]")));
    }
    Ok(())
}

impl Tensor {
    /// Re-creates this tensor's values as a trainable leaf.
    pub fn as_param(&self) -> Result<Tensor> {
        Tensor::param(self.data().to_vec(), self.shape())
    }
}
