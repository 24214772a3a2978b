//! Dense tensors, stable softmax/entropy primitives and a reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{value_and_grad, Gradients, NormStats, Tape, Var};
pub use tensor::{dot, norm2, squared_distance, Tensor};

use crate::error::{CtaError, Result};

/// Guard added to norms before dividing.
pub const NORM_EPS: f64 = 1e-12;
/// Variance guard inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CtaError::NonFinite(what))
    }
}

/// Max-shifted log-softmax of one logit row.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v, "log_softmax input")?;
    if v.is_empty() {
        return Err(CtaError::Shape("empty logits".into()));
    }
    Ok(log_softmax_unchecked(v))
}

pub(crate) fn log_softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    v.iter().map(|x| x - lse).collect()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(v)?.into_iter().map(f64::exp).collect())
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn entropy(logits: &[f64]) -> Result<f64> {
    let logp = log_softmax(logits)?;
    let h: f64 = -logp.iter().map(|&l| l.exp() * l).sum::<f64>();
    // tiny negative values from cancellation on one-hot rows
    Ok(h.max(0.0))
}

/// `v / (‖v‖₂ + ε)`; the zero vector maps to itself.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm2(v) + NORM_EPS;
    v.iter().map(|x| x / n).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
