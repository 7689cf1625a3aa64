//! Central-difference gradient checking.

use super::{Element, Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Compares the tape's analytic gradient of `f` at `x` with central
/// differences and returns the largest relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` builds a scalar from the recorded input on a fresh tape; it is
/// invoked once for the analytic pass and twice per element of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Tape<T>, TensorId) -> Result<TensorId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let id = tape.param(x.clone());
        let out = f(&mut tape, id)?;
        tape.backward(out)?;
        tape.grad(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); x.numel()])
    };

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.constant(probe);
        let out = f(&mut tape, id)?;
        Ok(tape.value(out).item()?.as_f64())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let base = x.data()[i].as_f64();
        let mut plus = x.clone();
        plus.data_mut()[i] = T::of(base + eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::of(base - eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
