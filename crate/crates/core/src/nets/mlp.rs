use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{check_times, time_features, Linear, TIME_FEATURES};
use super::{prefixed, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    /// Zero the output layer so the initial field is identically zero.
    pub zero_init_output: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            zero_init_output: true,
        }
    }
}

/// Velocity field `u(x, t)` on `R^D`: an MLP over `[x, time features]`
/// with GELU activations.
#[derive(Debug, Clone)]
pub struct VelocityMlp {
    dim: usize,
    layers: Vec<Linear>,
}

impl VelocityMlp {
    pub fn new<R: Rng + ?Sized>(dim: usize, config: &MlpConfig, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dim("velocity MLP needs a positive dimension"));
        }
        let mut widths = vec![dim + TIME_FEATURES];
        widths.extend(&config.hidden);
        widths.push(dim);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let last = i == widths.len() - 2;
            let layer = if last && config.zero_init_output {
                Linear::zeros(pair[0], pair[1])?
            } else {
                Linear::new(pair[0], pair[1], (1.0 / pair[0] as f64).sqrt(), rng)?
            };
            layers.push(layer);
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Estimated velocity at `x` (`[B, D]`) and per-row times `t`.
    pub fn forward(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        if cols != self.dim {
            return Err(Error::dim(format!("velocity MLP expects {} columns, got {cols}", self.dim)));
        }
        check_times(t, rows)?;
        let mut h = Tensor::concat_cols(&[x.clone(), time_features(t)?])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.gelu()?;
            }
        }
        Ok(h)
    }
}

impl Parameters for VelocityMlp {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layers.{i}"), l.named_parameters()))
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }
}
