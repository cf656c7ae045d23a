//! Dense math primitives over flat row-major f64 buffers.
//!
//! Everything is written position-row-wise so a row's result depends only on
//! that row's inputs; this is what makes causality bit-exact and lets batched
//! and unbatched paths produce identical floats.

/// Dot product with eight independent accumulators; `chunks_exact` + `zip`
/// lets the compiler drop bounds checks and vectorize.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut rest = 0.0;
    for (xa, xb) in ra.iter().zip(rb) {
        rest += xa * xb;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + rest
}

/// dst += s * src, elementwise.
#[inline]
pub fn axpy(s: f64, src: &[f64], dst: &mut [f64]) {
    debug_assert_eq!(src.len(), dst.len());
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

/// y[t] = x[t] @ W^T + b, for t < t_len. W is (out_dim x in_dim) row-major.
pub fn linear_fwd(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    t_len: usize,
    in_dim: usize,
    out_dim: usize,
    y: &mut [f64],
) {
    for t in 0..t_len {
        let xt = &x[t * in_dim..(t + 1) * in_dim];
        let yt = &mut y[t * out_dim..(t + 1) * out_dim];
        for o in 0..out_dim {
            yt[o] = b[o] + dot(xt, &w[o * in_dim..(o + 1) * in_dim]);
        }
    }
}

/// Accumulate dW += dy^T x, db += sum_t dy[t], dx += dy @ W.
pub fn linear_bwd(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    t_len: usize,
    in_dim: usize,
    out_dim: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for t in 0..t_len {
        let dyt = &dy[t * out_dim..(t + 1) * out_dim];
        let xt = &x[t * in_dim..(t + 1) * in_dim];
        let dxt = &mut dx[t * in_dim..(t + 1) * in_dim];
        for o in 0..out_dim {
            let g = dyt[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            axpy(g, xt, &mut dw[o * in_dim..(o + 1) * in_dim]);
            axpy(g, &w[o * in_dim..(o + 1) * in_dim], dxt);
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-position layer norm: y = (x - mean)/sqrt(var + eps) * g + b.
/// Returns per-position (mean, rstd) for the backward pass.
pub fn layernorm_fwd(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    t_len: usize,
    dim: usize,
    y: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
) {
    for t in 0..t_len {
        let xt = &x[t * dim..(t + 1) * dim];
        let m = xt.iter().sum::<f64>() / dim as f64;
        let var = xt.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / dim as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        mean[t] = m;
        rstd[t] = r;
        let yt = &mut y[t * dim..(t + 1) * dim];
        for i in 0..dim {
            yt[i] = (xt[i] - m) * r * g[i] + b[i];
        }
    }
}

/// Layer norm backward; accumulates dg/db and writes dx (overwrites).
#[allow(clippy::too_many_arguments)]
pub fn layernorm_bwd(
    dy: &[f64],
    x: &[f64],
    g: &[f64],
    mean: &[f64],
    rstd: &[f64],
    t_len: usize,
    dim: usize,
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for t in 0..t_len {
        let xt = &x[t * dim..(t + 1) * dim];
        let dyt = &dy[t * dim..(t + 1) * dim];
        let dxt = &mut dx[t * dim..(t + 1) * dim];
        let (m, r) = (mean[t], rstd[t]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..dim {
            let xhat = (xt[i] - m) * r;
            let dxhat = dyt[i] * g[i];
            dg[i] += dyt[i] * xhat;
            db[i] += dyt[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let inv_d = 1.0 / dim as f64;
        for i in 0..dim {
            let xhat = (xt[i] - m) * r;
            let dxhat = dyt[i] * g[i];
            dxt[i] = r * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
        }
    }
}

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// Smooth GELU (tanh approximation). Smoothness keeps finite-difference
/// gradient checks clean.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place stable softmax over a slice.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the maximum value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
