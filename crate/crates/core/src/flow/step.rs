use serde::{Deserialize, Serialize};

use super::field::{Context, VelocityField};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    Euler,
    #[default]
    Midpoint,
}

impl StepRule {
    /// Estimator evaluations per step.
    pub fn calls_per_step(self) -> usize {
        match self {
            StepRule::Euler => 1,
            StepRule::Midpoint => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StepRule::Euler => "euler",
            StepRule::Midpoint => "midpoint",
        }
    }
}

fn check_interval(t: f64, t_next: f64) -> Result<f64> {
    if t.is_nan() || t_next.is_nan() || t_next < t {
        return Err(Error::contract(format!("step must move forward in time: {t} -> {t_next}")));
    }
    Ok(t_next - t)
}

fn times(x: &Tensor, t: f64) -> Result<Vec<f64>> {
    let (rows, _) = x.dims2()?;
    Ok(vec![t; rows])
}

/// `x + d·u(x, t)` with `d = t_next − t`.
pub fn euler_step<F: VelocityField + ?Sized>(
    field: &F,
    x: &Tensor,
    t: f64,
    t_next: f64,
    ctx: Option<&Context>,
) -> Result<Tensor> {
    let d = check_interval(t, t_next)?;
    if d == 0.0 {
        return Ok(x.clone());
    }
    x.add(&field.velocity(x, &times(x, t)?, ctx)?.scale(d)?)
}

/// `x + d·u(x + (d/2)·u(x, t), t + d/2)`.
pub fn midpoint_step<F: VelocityField + ?Sized>(
    field: &F,
    x: &Tensor,
    t: f64,
    t_next: f64,
    ctx: Option<&Context>,
) -> Result<Tensor> {
    let d = check_interval(t, t_next)?;
    if d == 0.0 {
        return Ok(x.clone());
    }
    let half = x.add(&field.velocity(x, &times(x, t)?, ctx)?.scale(d / 2.0)?)?;
    x.add(&field.velocity(&half, &times(x, t + d / 2.0)?, ctx)?.scale(d)?)
}

/// One step `s(x, t, t_next)` under `rule`.
pub fn step<F: VelocityField + ?Sized>(
    field: &F,
    rule: StepRule,
    x: &Tensor,
    t: f64,
    t_next: f64,
    ctx: Option<&Context>,
) -> Result<Tensor> {
    match rule {
        StepRule::Euler => euler_step(field, x, t, t_next, ctx),
        StepRule::Midpoint => midpoint_step(field, x, t, t_next, ctx),
    }
}
