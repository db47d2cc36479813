use rand::Rng;

use super::field::{PairBatch, VelocityField};
use super::step::{step, StepRule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Points and velocity on the straight path: `x_t = (1−t)·x0 + t·x1`,
/// `v_t = x1 − x0`, with one `t` per row. Computed on values only.
pub fn interpolate_linear(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor)> {
    if x0.shape() != x1.shape() {
        return Err(Error::dim(format!("interpolate: {:?} vs {:?}", x0.shape(), x1.shape())));
    }
    let (rows, cols) = x0.dims2()?;
    if t.len() != rows {
        return Err(Error::dim(format!("{} times for {rows} rows", t.len())));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::contract(format!("interpolation time {bad} outside [0, 1]")));
    }
    let mut xt = Vec::with_capacity(rows * cols);
    let mut vt = Vec::with_capacity(rows * cols);
    for (i, &ti) in t.iter().enumerate() {
        let a = &x0.data()[i * cols..(i + 1) * cols];
        let b = &x1.data()[i * cols..(i + 1) * cols];
        for (p, q) in a.iter().zip(b) {
            xt.push((1.0 - ti) * p + ti * q);
            vt.push(q - p);
        }
    }
    Ok((Tensor::new(xt, &[rows, cols])?, Tensor::new(vt, &[rows, cols])?))
}

/// Mean over rows of `‖u(x_t, t) − v_t‖²`.
pub fn fm_loss<F: VelocityField + ?Sized>(field: &F, batch: &PairBatch, t: &[f64]) -> Result<Tensor> {
    let (xt, vt) = interpolate_linear(&batch.x0, &batch.x1, t)?;
    let u = field.velocity(&xt, t, batch.context.as_ref())?;
    u.sub(&vt)?.mean_row_sq_norm()
}

/// Integrates `x0` through `0 → interior[0] → … → 1` and returns the
/// endpoint.
pub fn walk<F: VelocityField + ?Sized>(
    field: &F,
    batch: &PairBatch,
    interior: &[f64],
    rule: StepRule,
) -> Result<Tensor> {
    let mut prev = 0.0;
    for &t in interior {
        if !(prev..=1.0).contains(&t) {
            return Err(Error::contract(format!(
                "walk times must be sorted within [0, 1], got {interior:?}"
            )));
        }
        prev = t;
    }
    let ctx = batch.context.as_ref();
    let mut x = batch.x0.clone();
    let mut t = 0.0;
    for &t_next in interior.iter().chain(std::iter::once(&1.0)) {
        x = step(field, rule, &x, t, t_next, ctx)?;
        t = t_next;
    }
    Ok(x)
}

/// Flow Walking loss with `interior.len() + 1` chained steps: mean over rows
/// of `‖x̂1 − x1‖²`.
pub fn fw_loss_times<F: VelocityField + ?Sized>(
    field: &F,
    batch: &PairBatch,
    interior: &[f64],
    rule: StepRule,
) -> Result<Tensor> {
    walk(field, batch, interior, rule)?.sub(&batch.x1)?.mean_row_sq_norm()
}

/// The three-step walk `0 → t1 → t2 → 1`.
pub fn fw_loss<F: VelocityField + ?Sized>(
    field: &F,
    batch: &PairBatch,
    t1: f64,
    t2: f64,
    rule: StepRule,
) -> Result<Tensor> {
    fw_loss_times(field, batch, &[t1, t2], rule)
}

/// `fw + alpha·fm`, each term with its own times.
pub fn hybrid_loss<F: VelocityField + ?Sized>(
    field: &F,
    batch: &PairBatch,
    alpha: f64,
    fw_times: &[f64],
    fm_times: &[f64],
    rule: StepRule,
) -> Result<Tensor> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::contract(format!("hybrid weight must be >= 0, got {alpha}")));
    }
    let fw = fw_loss_times(field, batch, fw_times, rule)?;
    if alpha == 0.0 {
        return Ok(fw);
    }
    fw.add(&fm_loss(field, batch, fm_times)?.scale(alpha)?)
}

/// `n` independent draws from `U[0, 1)`.
pub fn uniform_times<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// `n` independent uniform draws, sorted ascending.
pub fn sorted_times<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut t = uniform_times(rng, n);
    t.sort_by(f64::total_cmp);
    t
}
