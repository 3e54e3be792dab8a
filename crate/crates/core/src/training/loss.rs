use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Batch mean of `max(0, margin + D(anchor, positive) - D(anchor, negative))`
/// with `D` the Euclidean distance.
///
/// Rows whose hinge is inactive contribute exactly zero gradient.
pub fn triplet_loss<T: Real>(
    tape: &mut Tape<T>,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: T,
) -> Result<Var> {
    if margin < T::zero() {
        return Err(Error::invalid(
            "triplet_loss",
            format!("margin must be >= 0, got {margin}"),
        ));
    }
    let d_pos = tape.euclidean_distance(anchor, positive)?;
    let d_neg = tape.euclidean_distance(anchor, negative)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Embeddings on a line so that D⁺ and D⁻ take the given values.
    fn loss_for(d_pos: f64, d_neg: f64, margin: f64) -> (f64, Vec<f64>) {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
        let p = tape.param(Tensor::from_f64(&[1, 2], &[d_pos, 0.0]).unwrap());
        let n = tape.param(Tensor::from_f64(&[1, 2], &[0.0, d_neg]).unwrap());
        let l = triplet_loss(&mut tape, a, p, n, margin).unwrap();
        tape.backward(l).unwrap();
        let v = tape.value(l).item().unwrap();
        let mut g = tape.grad(a).unwrap().to_vec();
        g.extend_from_slice(tape.grad(p).unwrap());
        g.extend_from_slice(tape.grad(n).unwrap());
        (v, g)
    }

    #[test]
    fn hinge_arithmetic() {
        let (v, g) = loss_for(0.5, 0.9, 0.2);
        assert!(v.abs() <= 1e-6);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, _) = loss_for(0.9, 0.5, 0.2);
        assert!((v - 0.6).abs() <= 1e-6, "{v}");
    }

    #[test]
    fn degenerate_embeddings_give_margin() {
        let mut tape = Tape::<f32>::new();
        let e = Tensor::from_f64(&[3, 4], &[0.25; 12]).unwrap();
        let a = tape.param(e.clone());
        let p = tape.param(e.clone());
        let n = tape.param(e);
        let l = triplet_loss(&mut tape, a, p, n, 0.2).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.2).abs() <= 1e-6);
    }

    #[test]
    fn negative_margin_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[1, 2]).unwrap());
        assert!(triplet_loss(&mut tape, a, a, a, -0.1).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[1, 2]).unwrap());
        let b = tape.param(Tensor::zeros(&[1, 3]).unwrap());
        assert!(triplet_loss(&mut tape, a, b, a, 0.2).is_err());
    }
}
