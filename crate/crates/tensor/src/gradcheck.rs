//! Central finite-difference oracle, always evaluated in `f64`.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Builds a scalar-valued graph from one differentiable input.
pub trait ScalarFn: Fn(&mut Tape<f64>, Var) -> Result<Var> {}

impl<F> ScalarFn for F where F: Fn(&mut Tape<f64>, Var) -> Result<Var> {}

fn eval(f: &impl ScalarFn, point: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let out = f(&mut tape, x)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Analytic gradient of `f` at `point`.
pub fn analytic_grad(f: &impl ScalarFn, point: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let x = tape.variable(point.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    Ok(grads
        .get(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec())))
}

/// Central-difference derivative along one coordinate.
pub fn numeric_partial(
    f: &impl ScalarFn,
    point: &Tensor<f64>,
    coord: usize,
    step: f64,
) -> Result<f64> {
    let mut data = point.data().to_vec();
    let x0 = data[coord];
    data[coord] = x0 + step;
    let plus = eval(f, &Tensor::new(point.shape().to_vec(), data.clone())?)?;
    data[coord] = x0 - step;
    let minus = eval(f, &Tensor::new(point.shape().to_vec(), data)?)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Max over `coords` of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check_coords(
    f: &impl ScalarFn,
    point: &Tensor<f64>,
    step: f64,
    coords: impl IntoIterator<Item = usize>,
) -> Result<f64> {
    if !point.all_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    eval(f, point)?;
    let analytic = analytic_grad(f, point)?;
    let mut worst = 0.0f64;
    for c in coords {
        let numeric = numeric_partial(f, point, c, step)?;
        let err = (analytic.data()[c] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Max relative error over every coordinate of `point`.
pub fn grad_check(f: &impl ScalarFn, point: &Tensor<f64>, step: f64) -> Result<f64> {
    grad_check_coords(f, point, step, 0..point.len())
}
