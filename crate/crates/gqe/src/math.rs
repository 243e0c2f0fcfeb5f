//! Small dense-vector helpers used throughout the crate.
//!
//! Everything works on `f64` slices; persisted artifacts are 32-bit floats
//! and get widened at the call sites that read them.

use crate::error::{GqeError, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity. Returns 0.0 when either vector has zero norm, which
/// keeps downstream rankings well-defined on degenerate rows.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Scale `v` to unit L2 norm, failing on (near-)zero input.
pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n < 1e-12 {
        return Err(GqeError::ZeroVector(0));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Backward pass of softmax: given outputs `a = softmax(z)` and the gradient
/// `da` at the outputs, return the gradient at the inputs `z`.
pub fn softmax_backward(a: &[f64], da: &[f64]) -> Vec<f64> {
    let inner = dot(a, da);
    a.iter().zip(da).map(|(ai, di)| ai * (di - inner)).collect()
}

/// Row-major matrix product of an n x k sequence with a k x m weight matrix.
pub fn matmul(x: &[Vec<f64>], w: &[f64], k: usize, m: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            debug_assert_eq!(row.len(), k);
            let mut out = vec![0.0; m];
            for (i, xi) in row.iter().enumerate() {
                if *xi != 0.0 {
                    let wrow = &w[i * m..(i + 1) * m];
                    for (o, wv) in out.iter_mut().zip(wrow) {
                        *o += xi * wv;
                    }
                }
            }
            out
        })
        .collect()
}
