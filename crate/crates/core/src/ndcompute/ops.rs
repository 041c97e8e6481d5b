//! Row-wise nonlinearities, normalization and masked attention, each with
//! its hand-written backward pass.

use super::matrix::{mm, mm_nt, mm_tn, Matrix};
use crate::error::{Error, Result};

/// Softmax of one row into `out`, stabilized by the row maximum.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// `log Σ exp(row)` computed stably.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of one row into `out`.
pub fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(row);
    for (o, &z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros_like(z);
    for r in 0..z.rows() {
        softmax_into(z.row(r), out.row_mut(r));
    }
    out
}

/// Square visibility matrix: `visible(i, j)` means row `i` may attend to `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    n: usize,
    data: Vec<bool>,
}

impl BoolMask {
    pub fn new(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn all(n: usize) -> Self {
        Self::new(n, |_, _| true)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Cached attention probabilities for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub probs: Matrix,
}

/// Scaled dot-product attention with a hard visibility mask. Hidden
/// positions get exactly zero weight.
pub fn masked_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &BoolMask) -> Result<Matrix> {
    Ok(masked_attention_fwd(q, k, v, mask)?.0)
}

pub fn masked_attention_fwd(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &BoolMask,
) -> Result<(Matrix, AttentionCache)> {
    let t = q.rows();
    if k.shape() != q.shape() {
        return Err(Error::Dimension {
            op: "masked_attention(q, k)",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if v.rows() != t {
        return Err(Error::Dimension {
            op: "masked_attention(q, v)",
            lhs: q.shape(),
            rhs: v.shape(),
        });
    }
    if mask.len() != t {
        return Err(Error::Dimension {
            op: "masked_attention(mask)",
            lhs: (t, t),
            rhs: (mask.len(), mask.len()),
        });
    }
    let scale = 1.0 / (q.cols().max(1) as f64).sqrt();
    let mut scores = mm_nt(q, k);
    let mut buf = vec![0.0; t];
    for i in 0..t {
        let vis = mask.row(i);
        if !vis.iter().any(|&b| b) {
            return Err(Error::Contract(format!(
                "attention row {i} has no visible positions"
            )));
        }
        let row = scores.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..t {
            if vis[j] {
                row[j] *= scale;
                max = max.max(row[j]);
            }
        }
        let mut sum = 0.0;
        for j in 0..t {
            buf[j] = if vis[j] { (row[j] - max).exp() } else { 0.0 };
            sum += buf[j];
        }
        let inv = 1.0 / sum;
        for j in 0..t {
            row[j] = buf[j] * inv;
        }
    }
    let out = mm(&scores, v);
    Ok((out, AttentionCache { probs: scores }))
}

/// Gradients `(dq, dk, dv)` of masked attention given `dout`.
pub fn masked_attention_bwd(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cache: &AttentionCache,
    dout: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let scale = 1.0 / (q.cols().max(1) as f64).sqrt();
    let p = &cache.probs;
    let dv = mm_tn(p, dout);
    let mut ds = mm_nt(dout, v);
    for i in 0..p.rows() {
        let prow = p.row(i);
        let drow = ds.row_mut(i);
        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
        for (d, &pp) in drow.iter_mut().zip(prow) {
            *d = pp * (*d - dot) * scale;
        }
    }
    let dq = mm(&ds, k);
    let dk = mm_tn(&ds, q);
    (dq, dk, dv)
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with gain and bias (`1 x d` each).
pub fn layer_norm_fwd(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LayerNormCache) {
    let d = x.cols();
    let mut xhat = Matrix::zeros_like(x);
    let mut out = Matrix::zeros_like(x);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * is;
        }
        let o = out.row_mut(r);
        for c in 0..d {
            o[c] = xh[c] * gain.data()[c] + bias.data()[c];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dgain`, `dbias`.
pub fn layer_norm_bwd(
    cache: &LayerNormCache,
    gain: &Matrix,
    dout: &Matrix,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let d = dout.cols();
    let mut dx = Matrix::zeros_like(dout);
    let mut dxhat = vec![0.0; d];
    for r in 0..dout.rows() {
        let go = dout.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dgain.data_mut()[c] += go[c] * xh[c];
            dbias.data_mut()[c] += go[c];
            dxhat[c] = go[c] * gain.data()[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        let dxr = dx.row_mut(r);
        for c in 0..d {
            dxr[c] = is * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn map(x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

/// `dout ⊙ f'(pre)`
pub fn map_grad(pre: &Matrix, dout: &Matrix, fprime: impl Fn(f64) -> f64) -> Matrix {
    let mut out = dout.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        *o *= fprime(p);
    }
    out
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}
