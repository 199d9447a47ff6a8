use crate::error::{Error, Result};

/// Numerically stable softmax over a vector (max-shifted).
pub fn softmax_last(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::contract("softmax over an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input"));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax without validation; entries equal to `-inf` get probability zero.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::contract("log_softmax over an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("log_softmax input"));
    }
    let lse = log_sum_exp(x);
    Ok(x.iter().map(|v| v - lse).collect())
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `-log softmax(logits)[target]`, evaluated in log space.
pub fn cross_entropy_logits(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "vocabulary",
            index: target,
            bound: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cross-entropy logits"));
    }
    Ok(log_sum_exp(logits) - logits[target])
}

/// Layer normalisation with population variance, followed by `gain * x + bias`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::contract("layer_norm over an empty vector"));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x of {}", x.len()),
            format!("gain of {}, bias of {}", gain.len(), bias.len()),
        ));
    }
    let (mean, inv_std) = moments(x, eps);
    Ok(x
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv_std * g + b)
        .collect())
}

/// Mean and `1 / sqrt(var + eps)` of a row.
pub(crate) fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
