//! Central-difference validation of analytic gradients.

use crate::backward::backward;
use crate::error::{Result, TensorError};
use crate::init::Init;
use crate::tensor::Tensor;

const STEP: f64 = 1e-5;

/// Which derivative to validate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    /// `∇f` against central differences of `f`.
    First,
    /// Hessian-vector product `H·u` (backward through backward) against
    /// central differences of `u·∇f`, for a fixed direction `u`.
    Second,
}

fn scalar_value<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    // Evaluated on a grad leaf: `f` may itself differentiate internally.
    let y = f(&x.with_grad())?;
    if y.numel() != 1 {
        return Err(TensorError::NonScalarRoot(y.shape().to_vec()));
    }
    y.item()
}

/// Analytic gradient of `f` at `x`; zeros when `f` does not depend on `x`.
fn gradient<F>(f: &F, x: &Tensor, retain: bool) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let y = f(x)?;
    if y.numel() != 1 {
        return Err(TensorError::NonScalarRoot(y.shape().to_vec()));
    }
    if !y.requires_grad() {
        return Ok(Tensor::zeros(x.shape()));
    }
    Ok(backward(&y, &[x], retain)?.remove(0))
}

/// Fixed positive direction; avoids the all-ones vector, which is a null
/// direction for shift-invariant functions such as layer normalization.
fn direction(point: &Tensor) -> Tensor {
    Tensor::seeded(point.shape(), Init::Uniform { low: 0.5, high: 1.5 }, 0x5eed)
}

fn perturbed(point: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut data = point.to_vec();
    data[i] += delta;
    Tensor::raw(data, point.shape().to_vec())
}

/// Max over coordinates of `|analytic − numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor, order: Order) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_with_floor(f, point, order, 1e-8)
}

/// As [`grad_check`] with a caller-chosen absolute floor in the denominator,
/// for coordinates whose exact derivative vanishes.
pub fn grad_check_with_floor<F>(f: F, point: &Tensor, order: Order, floor: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = point.detach().with_grad();
    let (analytic, numeric): (Vec<f64>, Vec<f64>) = match order {
        Order::First => {
            let g = gradient(&f, &x, false)?;
            let mut fd = Vec::with_capacity(x.numel());
            for i in 0..x.numel() {
                let up = scalar_value(&f, &perturbed(point, i, STEP))?;
                let down = scalar_value(&f, &perturbed(point, i, -STEP))?;
                fd.push((up - down) / (2.0 * STEP));
            }
            (g.to_vec(), fd)
        }
        Order::Second => {
            let u = direction(point);
            let g = gradient(&f, &x, true)?;
            let total = g.dot(&u)?;
            let hv = if total.requires_grad() {
                backward(&total, &[&x], false)?.remove(0)
            } else {
                Tensor::zeros(x.shape())
            };
            let mut fd = Vec::with_capacity(x.numel());
            for i in 0..x.numel() {
                let up = gradient(&f, &perturbed(point, i, STEP).with_grad(), false)?;
                let down = gradient(&f, &perturbed(point, i, -STEP).with_grad(), false)?;
                let s_up = up.dot(&u)?.item()?;
                let s_down = down.dot(&u)?.item()?;
                fd.push((s_up - s_down) / (2.0 * STEP));
            }
            (hv.to_vec(), fd)
        }
    };
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + floor))
        .fold(0.0, f64::max))
}
