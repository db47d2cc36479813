use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Finite-difference formula used by [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error `O(h⁴)`.
    /// Allows a larger `h` on smooth functions, which keeps roundoff
    /// noise well below small gradient entries.
    FivePoint,
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Returns the max over coordinates of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_with(f, x, h, Stencil::Central)
}

pub fn grad_check_with<F>(f: F, x: &Tensor, h: f64, stencil: Stencil) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::contract(format!("grad_check step must be > 0, got {h}")));
    }
    let leaf = Tensor::param(x.data().to_vec(), x.shape())?;
    let loss = f(&leaf)?;
    let analytic = if loss.requires_grad() {
        loss.backward()?;
        leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()])
    } else {
        vec![0.0; leaf.numel()]
    };

    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut data = x.data().to_vec();
        data[i] += delta;
        let t = Tensor::new(data, x.shape())?;
        no_grad(|| f(&t))?.item()
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = match stencil {
            Stencil::Central => (eval(i, h)? - eval(i, -h)?) / (2.0 * h),
            Stencil::FivePoint => {
                (8.0 * (eval(i, h)? - eval(i, -h)?) - (eval(i, 2.0 * h)? - eval(i, -2.0 * h)?)) / (12.0 * h)
            }
        };
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
