//! Scalar functions and the small set of row-major matrix kernels the
//! encoder is built from.

use super::{NeuralError, Tensor};

/// Largest `f64` strictly below 1.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function. Never overflows; the result is kept strictly inside
/// (0, 1) even where the exact value rounds to 1.
pub fn sigmoid(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    let r = 1.0 / (1.0 + e);
    let p = if z >= 0.0 { r } else { e * r };
    p.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

pub const BCE_EPS: f64 = 1e-12;

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss(p: &Tensor, y: &Tensor) -> Result<f64, NeuralError> {
    if p.shape() != y.shape() {
        return Err(NeuralError::ShapeMismatch(format!(
            "bce: p {:?} vs y {:?}",
            p.shape(),
            y.shape()
        )));
    }
    Ok(bce_mean(p.data(), y.data()))
}

pub(crate) fn bce_mean(p: &[f64], y: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / p.len() as f64
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// In-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `out[m,n] = a[m,k] * b[k,n] + bias[n]`.
pub(crate) fn linear(a: &[f64], b: &[f64], bias: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        o.copy_from_slice(bias);
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]` (weight gradient).
pub(crate) fn acc_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T` (input gradient).
pub(crate) fn acc_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        let o = &mut out[i * k..(i + 1) * k];
        for (p, ov) in o.iter_mut().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            *ov += dot(ar, br);
        }
    }
}

/// Column sums of `a[m,n]` added into `out[n]`.
pub(crate) fn acc_colsum(a: &[f64], m: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(&a[i * n..(i + 1) * n]) {
            *o += v;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes without reassociation flags
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
