use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::Real;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
///
/// `grads[i]` must be present and congruent with `params[i]`.
pub fn adam_step<T: Real>(
    params: &mut [Param<T>],
    grads: &[Option<&[T]>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        match g {
            None => return Err(Error::MissingGradient(p.name.clone())),
            Some(g) if g.len() != p.tensor.numel() => {
                return Err(Error::invalid(
                    "adam_step",
                    format!("gradient for {} has {} elements", p.name, g.len()),
                ))
            }
            Some(_) => {}
        }
    }

    state.t += 1;
    let c = |v: f64| T::from_f64_lossy(v);
    let t = state.t as i32;
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let correction1 = c(1.0 - cfg.beta1.powi(t));
    let correction2 = c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (c(cfg.learning_rate), c(cfg.eps));
    let one = T::one();

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let g = g.expect("checked above");
        for (((w, &gi), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
