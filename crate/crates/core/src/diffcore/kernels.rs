// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-major f64 kernels shared by the differentiable graph and the
//! graph-free inference path.
//!
//! Both paths must produce bit-identical values, so every forward value in
//! the crate is computed through these functions with the same loop order.

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
    }
}

/// One output row: `out[n] = a_row[k] · b[k×n]`.
#[inline]
pub fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (p, &a) in a_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` where `g` is `m×n` and `b` is `k×n`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(g_row, b_row);
        }
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Layer normalization of one row; returns `(mean, inverse std)`.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
    }
    (mean, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `gelu(x) = 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Numerically stable softmax of one row, in place into `out`.
pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Causal attention for query row `t` of one head.
///
/// `q_row` is the head slice of the query; `keys`/`values` are full
/// row-major `[rows × d]` matrices, read at columns `col..col+head_dim` for
/// rows `0..=t`. Writes the attention weights into `probs[0..=t]` and the
/// head output into `out`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    q_row: &[f64],
    keys: &[f64],
    values: &[f64],
    d: usize,
    col: usize,
    t: usize,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let hd = q_row.len();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut max = f64::NEG_INFINITY;
    for j in 0..=t {
        let k_row = &keys[j * d + col..j * d + col + hd];
        let s = dot(q_row, k_row) * scale;
        probs[j] = s;
        if s > max {
            max = s;
        }
    }
    let mut sum = 0.0;
    for p in probs[..=t].iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in probs[..=t].iter_mut() {
        *p /= sum;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for j in 0..=t {
        let p = probs[j];
        let v_row = &values[j * d + col..j * d + col + hd];
        for (o, &v) in out.iter_mut().zip(v_row) {
            *o += p * v;
        }
    }
}
