//! Plain (non-recording) versions of the elementary operations.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::Array1;

use crate::error::{Error, Result};

use super::tape::Mat;

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Standardizes `x` with its population mean and variance, then applies `gamma`, `beta`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::Shape {
            op: "layer_norm",
            left: (1, x.len()),
            right: (gamma.len(), beta.len()),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * r * g + b)
        .collect())
}

/// `y = W x + b` with `W: out × in`.
pub fn linear_forward(w: &Mat, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w.ncols() != x.len() {
        return Err(Error::Shape {
            op: "linear_forward",
            left: w.dim(),
            right: (x.len(), 1),
        });
    }
    if w.nrows() != b.len() {
        return Err(Error::Shape {
            op: "linear_forward (bias)",
            left: w.dim(),
            right: (b.len(), 1),
        });
    }
    let y = w.dot(&Array1::from(x.to_vec()));
    Ok(y.iter().zip(b).map(|(v, b)| v + b).collect())
}
