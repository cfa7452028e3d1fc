//! Central-difference gradient checking.

use super::{Graph, Var};
use crate::error::{DipError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A scalar-valued function that can be recorded at any precision.
pub trait ScalarFunction {
    fn eval<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var>;
}

fn eval_value<T: Scalar, F: ScalarFunction>(f: &F, point: Tensor<T>) -> Result<f64> {
    let g = Graph::<T>::new();
    let x = g.constant(point);
    let y = f.eval(&g, x)?;
    let value = g.value(y);
    if value.len() != 1 {
        return Err(DipError::shape("grad_check", format!("output {:?} is not scalar", value.shape())));
    }
    Ok(value.item().as_f64())
}

/// Maximum elementwise relative error between `backward` at precision `T`
/// and a central-difference estimate.
///
/// The estimate uses the fourth-order five-point central stencil. The reference
/// difference quotient is evaluated in 64-bit arithmetic, so a
/// 32-bit check measures the error of the 32-bit gradient rather than the
/// cancellation noise of a 32-bit difference quotient. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T: Scalar, F: ScalarFunction>(f: &F, point: &Tensor<T>, step: f64) -> Result<f64> {
    if step <= 0.0 || !step.is_finite() {
        return Err(DipError::Config(format!("grad_check step must be positive, got {step}")));
    }
    let g = Graph::<T>::new();
    let x = g.param(point.clone());
    let y = f.eval(&g, x)?;
    let grads = g.backward_scalar(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let base = point.cast::<f64>();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let at = |offset: f64| -> Result<f64> {
            let mut shifted = base.clone();
            shifted.data_mut()[i] += offset;
            eval_value::<f64, F>(f, shifted)
        };
        // five-point central stencil
        let numeric = (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?))
            / (12.0 * step);
        let a = analytic.data()[i].as_f64();
        if !numeric.is_finite() || !a.is_finite() {
            return Err(DipError::NonFinite(format!(
                "gradient component {i}: analytic {a}, numeric {numeric}"
            )));
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
