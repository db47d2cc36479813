use crate::error::{Error, Result};
use crate::nets::{DitVelocityLayer, VelocityMlp};
use crate::tensor::Tensor;

/// Attention context for sequence-aware estimators: `[B·S, D]` latents of
/// `B` stacked sequences of length `seq_len`.
#[derive(Debug, Clone)]
pub struct Context {
    pub latents: Tensor,
    pub seq_len: usize,
}

/// Anything that maps `(x [B, D], per-row t)` to a velocity of the same
/// shape.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: &[f64], ctx: Option<&Context>) -> Result<Tensor>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn velocity(&self, x: &Tensor, t: &[f64], ctx: Option<&Context>) -> Result<Tensor> {
        (**self).velocity(x, t, ctx)
    }
}

impl VelocityField for VelocityMlp {
    fn velocity(&self, x: &Tensor, t: &[f64], _ctx: Option<&Context>) -> Result<Tensor> {
        self.forward(x, t)
    }
}

impl VelocityField for DitVelocityLayer {
    fn velocity(&self, x: &Tensor, t: &[f64], ctx: Option<&Context>) -> Result<Tensor> {
        let ctx = ctx.ok_or_else(|| Error::contract("DiT velocity layer needs an attention context"))?;
        self.forward(x, t, &ctx.latents, ctx.seq_len)
    }
}

/// Wraps a closure as a velocity field (analytic fields, tests).
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&Tensor, &[f64]) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: &[f64], _ctx: Option<&Context>) -> Result<Tensor> {
        (self.0)(x, t)
    }
}

/// Matched rows of source and target latents.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub context: Option<Context>,
    /// Originating token positions (or pair ids for toy data).
    pub positions: Vec<usize>,
}

impl PairBatch {
    pub fn new(x0: Tensor, x1: Tensor) -> Result<Self> {
        let (rows, _) = x0.dims2()?;
        Self::with_positions(x0, x1, (0..rows).collect())
    }

    pub fn with_positions(x0: Tensor, x1: Tensor, positions: Vec<usize>) -> Result<Self> {
        let (rows, _) = x0.dims2()?;
        if x0.shape() != x1.shape() {
            return Err(Error::dim(format!(
                "pair batch: x0 {:?} vs x1 {:?}",
                x0.shape(),
                x1.shape()
            )));
        }
        if positions.len() != rows {
            return Err(Error::dim(format!("{} positions for {rows} rows", positions.len())));
        }
        Ok(Self {
            x0,
            x1,
            context: None,
            positions,
        })
    }

    pub fn with_context(mut self, ctx: Context) -> Result<Self> {
        if ctx.latents.shape() != self.x0.shape() {
            return Err(Error::dim(format!(
                "context {:?} vs batch {:?}",
                ctx.latents.shape(),
                self.x0.shape()
            )));
        }
        if ctx.seq_len == 0 || !self.rows().is_multiple_of(ctx.seq_len) {
            return Err(Error::dim(format!(
                "{} rows are not whole sequences of length {}",
                self.rows(),
                ctx.seq_len
            )));
        }
        self.context = Some(ctx);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.x0.shape()[1]
    }
}
