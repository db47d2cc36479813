use rand::Rng;

use super::layers::{check_times, time_features, Linear, TIME_FEATURES};
use super::transformer::TransformerLayer;
use super::{prefixed, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-token scale/shift/gate for the attention and MLP branches, each
/// `[N, D]`.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub attn_scale: Tensor,
    pub attn_shift: Tensor,
    pub attn_gate: Tensor,
    pub mlp_scale: Tensor,
    pub mlp_shift: Tensor,
    pub mlp_gate: Tensor,
}

impl Modulation {
    /// The same `(scale, shift, gate)` on every token and both branches.
    pub fn constant(rows: usize, dim: usize, scale: f64, shift: f64, gate: f64) -> Result<Self> {
        let s = Tensor::full(&[rows, dim], scale)?;
        let b = Tensor::full(&[rows, dim], shift)?;
        let g = Tensor::full(&[rows, dim], gate)?;
        Ok(Self {
            attn_scale: s.clone(),
            attn_shift: b.clone(),
            attn_gate: g.clone(),
            mlp_scale: s,
            mlp_shift: b,
            mlp_gate: g,
        })
    }

    /// `(1, 0, 1)`: the block reduces to the plain teacher layer.
    pub fn identity(rows: usize, dim: usize) -> Result<Self> {
        Self::constant(rows, dim, 1.0, 0.0, 1.0)
    }
}

/// Velocity estimator built from a teacher layer plus a conditioning MLP
/// that maps time features to per-token modulation.
///
/// Queries read the current state `x_t`; keys and values read a fixed
/// context stream (the teacher's latents entering the replaced block), so
/// every token may sit at its own time. The output layer of the
/// conditioning MLP starts at zero, which makes the initial modulation
/// `(1, 0, 1)` and the initial velocity `teacher_layer(x_t) − x_t`.
#[derive(Debug, Clone)]
pub struct DitVelocityLayer {
    pub block: TransformerLayer,
    pub cond_in: Linear,
    pub cond_out: Linear,
}

impl DitVelocityLayer {
    pub fn from_teacher_layer<R: Rng + ?Sized>(layer: &TransformerLayer, cond_hidden: usize, rng: &mut R) -> Result<Self> {
        let d = layer.d_model();
        let mut block = layer.clone();
        // fresh leaves so training never aliases the teacher's tensors
        for p in block.parameters_mut() {
            *p = p.as_param()?;
        }
        Ok(Self {
            block,
            cond_in: Linear::new(TIME_FEATURES, cond_hidden, (1.0 / TIME_FEATURES as f64).sqrt(), rng)?,
            cond_out: Linear::zeros(cond_hidden, 6 * d)?,
        })
    }

    pub fn d_model(&self) -> usize {
        self.block.d_model()
    }

    /// Parameters added on top of the copied teacher layer.
    pub fn conditioning_parameters(&self) -> usize {
        self.cond_in.num_parameters() + self.cond_out.num_parameters()
    }

    pub fn modulation(&self, t: &[f64]) -> Result<Modulation> {
        let d = self.d_model();
        let raw = self
            .cond_out
            .forward(&self.cond_in.forward(&time_features(t)?)?.silu()?)?;
        let piece = |i: usize, base: f64| -> Result<Tensor> {
            let p = raw.narrow_cols(i * d, d)?;
            if base == 0.0 {
                Ok(p)
            } else {
                p.add_scalar(base)
            }
        };
        Ok(Modulation {
            attn_scale: piece(0, 1.0)?,
            attn_shift: piece(1, 0.0)?,
            attn_gate: piece(2, 1.0)?,
            mlp_scale: piece(3, 1.0)?,
            mlp_shift: piece(4, 0.0)?,
            mlp_gate: piece(5, 1.0)?,
        })
    }

    /// Output of the modulated block (before residual subtraction).
    pub fn block_forward(&self, x: &Tensor, modulation: &Modulation, ctx: &Tensor, seq_len: usize) -> Result<Tensor> {
        if x.shape() != ctx.shape() {
            return Err(Error::dim(format!(
                "state {:?} and context {:?} differ in shape",
                x.shape(),
                ctx.shape()
            )));
        }
        let b = &self.block;
        let h_attn = b
            .ln1
            .forward(x)?
            .mul(&modulation.attn_scale)?
            .add(&modulation.attn_shift)?;
        let attn = b.attention(&h_attn, &b.ln1.forward(ctx)?, seq_len)?;
        let h_mlp = b
            .ln2
            .forward(x)?
            .mul(&modulation.mlp_scale)?
            .add(&modulation.mlp_shift)?;
        let mlp = b.mlp(&h_mlp)?;
        x.add(&attn.mul(&modulation.attn_gate)?)?
            .add(&mlp.mul(&modulation.mlp_gate)?)
    }

    /// Velocity `block(x_t) − x_t` with per-token times `t`.
    pub fn forward(&self, x: &Tensor, t: &[f64], ctx: &Tensor, seq_len: usize) -> Result<Tensor> {
        let (rows, _) = x.dims2()?;
        check_times(t, rows)?;
        let m = self.modulation(t)?;
        self.block_forward(x, &m, ctx, seq_len)?.sub(x)
    }

    /// Velocity under an explicitly supplied modulation.
    pub fn forward_modulated(&self, x: &Tensor, modulation: &Modulation, ctx: &Tensor, seq_len: usize) -> Result<Tensor> {
        self.block_forward(x, modulation, ctx, seq_len)?.sub(x)
    }
}

impl Parameters for DitVelocityLayer {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("block", self.block.named_parameters());
        out.extend(prefixed("cond_in", self.cond_in.named_parameters()));
        out.extend(prefixed("cond_out", self.cond_out.named_parameters()));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.block.parameters_mut();
        out.extend(self.cond_in.parameters_mut());
        out.extend(self.cond_out.parameters_mut());
        out
    }
}
