use super::sum::{ksum, norm};
use crate::error::{Error, Result};

/// Norms at or below this are rejected by [`l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("l2_normalize input"));
    }
    let n = norm(v);
    if n <= NORM_FLOOR {
        return Err(Error::NearZeroNorm { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + ksum(v.iter().map(|x| (x - max).exp())).ln()
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("log_softmax"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log_softmax input"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = ksum(logits.iter().map(|x| (x - max).exp())).ln();
    Ok(logits.iter().map(|x| (x - max) - log_z).collect())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(logits)?.into_iter().map(f64::exp).collect())
}
