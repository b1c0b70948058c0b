//! Transformer building blocks with hand-written backward passes.
//!
//! Activations are row-major `rows × dim` buffers. Linear weights are stored
//! `in × out` so a forward pass is `X · W + b`.

use crate::linalg::{add_assign, dot, matmul, matmul_a_bt, matmul_at_b_acc};

pub const LN_EPS: f64 = 1e-6;

pub fn linear(x: &[f64], rows: usize, w: &[f64], b: Option<&[f64]>, din: usize, dout: usize) -> Vec<f64> {
    let mut y = matmul(x, w, rows, din, dout);
    if let Some(b) = b {
        for r in 0..rows {
            add_assign(&mut y[r * dout..(r + 1) * dout], b);
        }
    }
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    w: &[f64],
    din: usize,
    dout: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    matmul_at_b_acc(x, dy, dw, rows, din, dout);
    if let Some(db) = db {
        for r in 0..rows {
            add_assign(db, &dy[r * dout..(r + 1) * dout]);
        }
    }
    matmul_a_bt(dy, w, rows, dout, din)
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], rows: usize, dim: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    dim: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let rows = cache.rstd.len();
    let mut dx = vec![0.0; rows * dim];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let g = &dy[r * dim..(r + 1) * dim];
        for j in 0..dim {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
        let mean_dx = dot(&dxhat, xh) / dim as f64;
        let rs = cache.rstd[r];
        for j in 0..dim {
            dx[r * dim + j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
            let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
            g * d
        })
        .collect()
}

/// Multi-head self-attention parameters, borrowed from a parameter store.
pub struct AttentionWeights<'a> {
    pub qkv_w: &'a [f64],
    pub qkv_b: &'a [f64],
    pub out_w: &'a [f64],
    pub out_b: &'a [f64],
}

pub struct AttentionGrads<'a> {
    pub qkv_w: &'a mut [f64],
    pub qkv_b: &'a mut [f64],
    pub out_w: &'a mut [f64],
    pub out_b: &'a mut [f64],
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Vec<f64>,
    qkv: Vec<f64>,
    /// `heads × T × T` row-stochastic attention weights.
    pub probs: Vec<f64>,
    ctx: Vec<f64>,
}

fn head_slice(qkv: &[f64], t: usize, dim: usize, part: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * dh);
    for r in 0..t {
        let base = r * 3 * dim + part * dim + h * dh;
        out.extend_from_slice(&qkv[base..base + dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], t: usize, width: usize, offset: usize, dh: usize) {
    for r in 0..t {
        let base = r * width + offset;
        add_assign(&mut dst[base..base + dh], &src[r * dh..(r + 1) * dh]);
    }
}

pub fn attention(x: &[f64], t: usize, dim: usize, heads: usize, w: &AttentionWeights) -> (Vec<f64>, AttentionCache) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear(x, t, w.qkv_w, Some(w.qkv_b), dim, 3 * dim);
    let mut probs = vec![0.0; heads * t * t];
    let mut ctx = vec![0.0; t * dim];
    for h in 0..heads {
        let q = head_slice(&qkv, t, dim, 0, h, dh);
        let k = head_slice(&qkv, t, dim, 1, h, dh);
        let v = head_slice(&qkv, t, dim, 2, h, dh);
        let mut s = matmul_a_bt(&q, &k, t, dh, t);
        for r in 0..t {
            let row = &mut s[r * t..(r + 1) * t];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e * scale - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let c = matmul(&s, &v, t, t, dh);
        scatter_head(&mut ctx, &c, t, dim, h * dh, dh);
        probs[h * t * t..(h + 1) * t * t].copy_from_slice(&s);
    }
    let out = linear(&ctx, t, w.out_w, Some(w.out_b), dim, dim);
    (out, AttentionCache { x: x.to_vec(), qkv, probs, ctx })
}

pub fn attention_backward(
    dout: &[f64],
    cache: &AttentionCache,
    t: usize,
    dim: usize,
    heads: usize,
    w: &AttentionWeights,
    g: AttentionGrads,
) -> Vec<f64> {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dctx = linear_backward(&cache.ctx, dout, t, w.out_w, dim, dim, g.out_w, Some(g.out_b));
    let mut dqkv = vec![0.0; t * 3 * dim];
    for h in 0..heads {
        let q = head_slice(&cache.qkv, t, dim, 0, h, dh);
        let k = head_slice(&cache.qkv, t, dim, 1, h, dh);
        let v = head_slice(&cache.qkv, t, dim, 2, h, dh);
        let p = &cache.probs[h * t * t..(h + 1) * t * t];
        let mut dc = Vec::with_capacity(t * dh);
        for r in 0..t {
            let base = r * dim + h * dh;
            dc.extend_from_slice(&dctx[base..base + dh]);
        }
        // ctx_h = P · V
        let dp = matmul_a_bt(&dc, &v, t, dh, t);
        let mut dv = vec![0.0; t * dh];
        matmul_at_b_acc(p, &dc, &mut dv, t, t, dh);
        // softmax rows
        let mut ds = vec![0.0; t * t];
        for r in 0..t {
            let pr = &p[r * t..(r + 1) * t];
            let gr = &dp[r * t..(r + 1) * t];
            let inner = dot(pr, gr);
            for c in 0..t {
                ds[r * t + c] = pr[c] * (gr[c] - inner) * scale;
            }
        }
        // S = Q · Kᵀ
        let dq = matmul(&ds, &k, t, t, dh);
        let mut dk = vec![0.0; t * dh];
        matmul_at_b_acc(&ds, &q, &mut dk, t, t, dh);
        scatter_head(&mut dqkv, &dq, t, 3 * dim, h * dh, dh);
        scatter_head(&mut dqkv, &dk, t, 3 * dim, dim + h * dh, dh);
        scatter_head(&mut dqkv, &dv, t, 3 * dim, 2 * dim + h * dh, dh);
    }
    linear_backward(&cache.x, &dqkv, t, w.qkv_w, dim, 3 * dim, g.qkv_w, Some(g.qkv_b))
}
