use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by [`check_gradient`].
pub const FD_STEP: f64 = 1e-5;

fn eval_output<F>(op: &F, input: &Tensor) -> Tensor
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = op(&mut tape, x);
    tape.value(y).clone()
}

/// Compares the analytic gradient of `sum(op(x))` against central finite
/// differences and returns `max_i |analytic_i − numeric_i| / max(|numeric_i|, 1e-8)`.
///
/// Output differences are taken elementwise before summation and divided by
/// the step actually realized in floating point, so linear ops check exactly.
pub fn check_gradient<F>(name: &str, op: F, input: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.variable(input.clone());
    let y = op(&mut tape, x);
    if !tape.value(y).is_finite() {
        return Err(Error::NonFinite { op: name.to_string() });
    }
    let total = tape.sum(y);
    let grads = tape.backward(total)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        let mut minus = input.clone();
        plus.data_mut()[i] += FD_STEP;
        minus.data_mut()[i] -= FD_STEP;
        let step = plus.data()[i] - minus.data()[i];
        let (yp, ym) = (eval_output(&op, &plus), eval_output(&op, &minus));
        if !yp.is_finite() || !ym.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let diff: f64 = yp.data().iter().zip(ym.data()).map(|(a, b)| a - b).sum();
        let numeric = diff / step;
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
