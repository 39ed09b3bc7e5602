//! Central finite-difference gradient probes.
//!
//! Used by tests to validate analytic gradients of the loss terms and
//! attention blocks. The probe perturbs one scalar at a time, so keep the
//! tensors small.

use crate::error::Result;
use candle_core::{Tensor, Var};

/// Numeric gradient of `f` with respect to `var` by central differences:
/// `(f(x + h) - f(x - h)) / (2h)` per element. `var` is restored afterwards.
pub fn central_diff_grad(
    var: &Var,
    h: f64,
    mut f: impl FnMut() -> Result<f64>,
) -> Result<Vec<f64>> {
    let base = var.as_tensor().detach().to_dtype(candle_core::DType::F64)?;
    let dims = base.dims().to_vec();
    let flat = base.flatten_all()?.to_vec1::<f64>()?;
    let dtype = var.dtype();
    let dev = var.device().clone();
    let mut grad = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let tp = Tensor::from_vec(plus, dims.as_slice(), &dev)?.to_dtype(dtype)?;
        var.set(&tp)?;
        let fp = f()?;
        let tm = Tensor::from_vec(minus, dims.as_slice(), &dev)?.to_dtype(dtype)?;
        var.set(&tm)?;
        let fm = f()?;
        grad.push((fp - fm) / (2.0 * h));
    }
    let restore = Tensor::from_vec(flat, dims.as_slice(), &dev)?.to_dtype(dtype)?;
    var.set(&restore)?;
    Ok(grad)
}

/// Numeric derivative of `f` with respect to one element of `var`, for
/// spot-checking large parameter sets where probing every element is too
/// slow.
pub fn central_diff_at(
    var: &Var,
    index: usize,
    h: f64,
    mut f: impl FnMut() -> Result<f64>,
) -> Result<f64> {
    let base = var.as_tensor().detach().to_dtype(candle_core::DType::F64)?;
    let dims = base.dims().to_vec();
    let flat = base.flatten_all()?.to_vec1::<f64>()?;
    let dtype = var.dtype();
    let dev = var.device().clone();
    let mut plus = flat.clone();
    plus[index] += h;
    var.set(&Tensor::from_vec(plus, dims.as_slice(), &dev)?.to_dtype(dtype)?)?;
    let fp = f()?;
    let mut minus = flat.clone();
    minus[index] -= h;
    var.set(&Tensor::from_vec(minus, dims.as_slice(), &dev)?.to_dtype(dtype)?)?;
    let fm = f()?;
    var.set(&Tensor::from_vec(flat, dims.as_slice(), &dev)?.to_dtype(dtype)?)?;
    Ok((fp - fm) / (2.0 * h))
}

/// Largest absolute and relative deviation between an analytic gradient and
/// a numeric one. The relative error normalizes by
/// `max(|analytic|, |numeric|, floor)`.
pub fn grad_deviation(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, f64) {
    assert_eq!(analytic.len(), numeric.len());
    let mut abs_worst = 0.0f64;
    let mut rel_worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        abs_worst = abs_worst.max(abs);
        rel_worst = rel_worst.max(rel);
    }
    (abs_worst, rel_worst)
}

/// Flattens a tensor gradient to `Vec<f64>` for comparison.
pub fn grad_to_vec(g: &Tensor) -> Result<Vec<f64>> {
    Ok(g.detach().to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
