//! Shared forward kernels.
//!
//! Both the tape ops and the tape-free evaluation paths call these
//! functions, so a value computed with and without recording is the same
//! `f64` bit pattern. Several identities downstream (self-KL = 0, ratio at
//! the old parameters = 1) rely on that.

use super::tensor::Tensor;

/// Numerically stable logistic function.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// softplus(z) = log(1 + e^z), stable for |z| large.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// log σ(z) = -softplus(-z).
pub(crate) fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// y = W·concat(segments) + b. `w` is Matrix{out, in}, `b` Vector(out) or absent.
pub(crate) fn affine(w: &Tensor, b: Option<&Tensor>, segments: &[&[f64]]) -> Vec<f64> {
    let (rows, cols) = match w.shape {
        super::Shape::Matrix { rows, cols } => (rows, cols),
        _ => panic!("affine weight must be a matrix"),
    };
    debug_assert_eq!(segments.iter().map(|s| s.len()).sum::<usize>(), cols);
    let mut out = match b {
        Some(b) => b.data.clone(),
        None => vec![0.0; rows],
    };
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w.data[i * cols..(i + 1) * cols];
        let mut j = 0;
        let mut acc = 0.0;
        for seg in segments {
            for &x in *seg {
                acc += row[j] * x;
                j += 1;
            }
        }
        *o += acc;
    }
    out
}

pub(crate) fn map_tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

pub(crate) fn map_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub(crate) fn map_sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().copied().map(sigmoid).collect()
}

pub(crate) fn map_log_sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().copied().map(log_sigmoid).collect()
}

pub(crate) fn map_log(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.ln()).collect()
}

pub(crate) fn map_exp(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.exp()).collect()
}

pub(crate) fn map_square(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v * v).collect()
}

pub(crate) fn sum(x: &[f64]) -> f64 {
    x.iter().sum()
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    sum(x) / x.len() as f64
}

pub(crate) fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
