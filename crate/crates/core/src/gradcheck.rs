//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by the gradient suite.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Compares the tape gradient of a scalar function against central
/// differences, all in `f64`.
///
/// `f` receives a fresh tape and the leaf holding `x`, and returns the
/// scalar output. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over the elements
/// of `x`.
pub fn check_gradients<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(input);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = match tape.grad(leaf) {
        Some(g) => g.to_vec(),
        // unreachable input: the derivative is identically zero
        None => vec![0.0; x.numel()],
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone().with_requires_grad(false);
        plus.data_mut()[i] += h;
        let mut minus = x.clone().with_requires_grad(false);
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if !err.is_finite() {
            return Err(Error::invalid(
                "check_gradients",
                format!("non-finite gradient at element {i}"),
            ));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
