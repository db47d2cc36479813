use super::field::{Context, VelocityField};
use super::step::{step, StepRule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The `k + 1` grid points `i / k`. Each point is computed directly rather
/// than by repeated addition of `1/k`, so the last one is exactly 1.
pub fn time_grid(k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::contract("inference needs at least one step"));
    }
    Ok((0..=k).map(|i| i as f64 / k as f64).collect())
}

/// `k` equal-width steps from `t = 0` to `t = 1`.
pub fn lft_infer<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Tensor,
    k: usize,
    rule: StepRule,
    ctx: Option<&Context>,
) -> Result<Tensor> {
    let grid = time_grid(k)?;
    let mut x = x0.clone();
    for w in grid.windows(2) {
        x = step(field, rule, &x, w[0], w[1], ctx)?;
    }
    Ok(x)
}

/// Like [`lft_infer`] but also returns every intermediate state (`k + 1`
/// tensors, starting with `x0`).
pub fn lft_trajectory<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Tensor,
    k: usize,
    rule: StepRule,
    ctx: Option<&Context>,
) -> Result<Vec<Tensor>> {
    let grid = time_grid(k)?;
    let mut states = vec![x0.clone()];
    for w in grid.windows(2) {
        let next = step(field, rule, states.last().expect("non-empty"), w[0], w[1], ctx)?;
        states.push(next);
    }
    Ok(states)
}

/// One block of an unrolled flow layer: the estimator applied on a fixed
/// time interval, followed by the residual update of the step rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowBlock {
    pub t: f64,
    pub t_next: f64,
    pub rule: StepRule,
}

impl FlowBlock {
    pub fn apply<F: VelocityField + ?Sized>(&self, field: &F, x: &Tensor, ctx: Option<&Context>) -> Result<Tensor> {
        step(field, self.rule, x, self.t, self.t_next, ctx)
    }
}

/// A flow layer hardened into a fixed stack of blocks. With `k = 1` and
/// Euler it is a single estimator call plus a skip connection.
pub struct UnrolledFlow<'a, F: ?Sized> {
    field: &'a F,
    blocks: Vec<FlowBlock>,
}

impl<'a, F: VelocityField + ?Sized> UnrolledFlow<'a, F> {
    pub fn blocks(&self) -> &[FlowBlock] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Number of estimator evaluations in one forward pass.
    pub fn estimator_calls(&self) -> usize {
        self.blocks.iter().map(|b| b.rule.calls_per_step()).sum()
    }

    pub fn forward(&self, x0: &Tensor, ctx: Option<&Context>) -> Result<Tensor> {
        self.blocks.iter().try_fold(x0.clone(), |x, b| b.apply(self.field, &x, ctx))
    }
}

pub fn unroll_graph<F: VelocityField + ?Sized>(field: &F, k: usize, rule: StepRule) -> Result<UnrolledFlow<'_, F>> {
    let grid = time_grid(k)?;
    let blocks = grid
        .windows(2)
        .map(|w| FlowBlock {
            t: w[0],
            t_next: w[1],
            rule,
        })
        .collect();
    Ok(UnrolledFlow { field, blocks })
}
