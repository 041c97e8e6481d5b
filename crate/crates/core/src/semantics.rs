//! Sparse semantic anchor alignment and the additive fusion module.
//!
//! `N` semantic vectors are laid onto a length-`T` token timeline: the
//! first `Q` positions of each block are anchors, anchors are filled with
//! semantic rows in order, and every other row is zero. The fused input is
//! `W2·ReLU(W1·(E + h') + b1) + b2`, applied position by position.

use crate::error::{param_err, Error, Result};
use crate::masking::BlockPartition;
use crate::ndcompute::{map, map_grad, mm, mm_nt, mm_tn, relu, relu_grad, Matrix};

/// Conditioning vectors `h_1..h_N`, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticStates {
    pub h: Matrix,
}

impl SemanticStates {
    pub fn new(h: Matrix) -> Self {
        Self { h }
    }

    pub fn count(&self) -> usize {
        self.h.rows()
    }

    pub fn width(&self) -> usize {
        self.h.cols()
    }
}

/// Anchor positions: the first `q` positions of every block, clipped to the
/// block, ascending.
pub fn build_anchors(part: &BlockPartition, q: usize) -> Result<Vec<usize>> {
    if q == 0 {
        return param_err("Q", "at least one anchor per block is required");
    }
    if q > part.block_size() {
        return param_err("Q", format!("{q} anchors exceed block size {}", part.block_size()));
    }
    Ok(part
        .blocks()
        .flat_map(|r| {
            let end = (r.start + q).min(r.end);
            r.start..end
        })
        .collect())
}

/// Sparse conditioning stream `h'` of length `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSemantics {
    pub h_prime: Matrix,
    pub anchors: Vec<usize>,
    /// `(position, semantic row)` for every anchor that received a vector.
    pub assigned: Vec<(usize, usize)>,
}

impl AlignedSemantics {
    pub fn len(&self) -> usize {
        self.h_prime.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h_prime.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.h_prime.cols()
    }

    /// The first `len` positions. Anchors past `len` are dropped.
    pub fn prefix(&self, len: usize) -> AlignedSemantics {
        AlignedSemantics {
            h_prime: self.h_prime.slice_rows(0, len),
            anchors: self.anchors.iter().copied().filter(|&a| a < len).collect(),
            assigned: self.assigned.iter().copied().filter(|&(a, _)| a < len).collect(),
        }
    }

    /// Accumulates the gradient of `h'` into the gradient of `h`.
    pub fn scatter_grad(&self, d_h_prime: &Matrix, d_h: &mut Matrix) {
        for &(pos, m) in &self.assigned {
            for (g, x) in d_h.row_mut(m).iter_mut().zip(d_h_prime.row(pos)) {
                *g += x;
            }
        }
    }
}

/// Order-preserving assignment: anchor `a_m` receives `h_m` while `m ≤ N`,
/// everything else stays zero. Semantic rows beyond the anchor count are
/// dropped with a warning.
pub fn align(h: &SemanticStates, anchors: &[usize], len: usize) -> Result<AlignedSemantics> {
    if anchors.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("anchor positions must be strictly ascending".into()));
    }
    if anchors.last().is_some_and(|&a| a >= len) {
        return Err(Error::Input(format!("anchor beyond sequence length {len}")));
    }
    if h.count() > anchors.len() {
        log::warn!(
            "{} semantic vectors but only {} anchors; dropping {}",
            h.count(),
            anchors.len(),
            h.count() - anchors.len()
        );
    }
    let mut h_prime = Matrix::zeros(len, h.width());
    let mut assigned = Vec::with_capacity(h.count().min(anchors.len()));
    for (m, &pos) in anchors.iter().enumerate().take(h.count()) {
        h_prime.row_mut(pos).copy_from_slice(h.h.row(m));
        assigned.push((pos, m));
    }
    Ok(AlignedSemantics {
        h_prime,
        anchors: anchors.to_vec(),
        assigned,
    })
}

/// Weights of the two-layer fusion feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl FusionParams {
    pub fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, d_ff),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::zeros(d_ff, d),
            b2: Matrix::zeros(1, d),
        }
    }
}

pub struct FusionCache {
    x: Matrix,
    pre: Matrix,
    u: Matrix,
}

/// Gradients of the fusion module: `(dW1, db1, dW2, db2)` plus the gradient
/// of the shared input `E + h'`, which flows to both summands.
pub struct FusionGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub input: Matrix,
}

fn check_widths(tok_emb: &Matrix, h_prime: &Matrix, fp: &FusionParams) -> Result<()> {
    if tok_emb.shape() != h_prime.shape() {
        return Err(Error::Dimension {
            op: "fuse(E, h')",
            lhs: tok_emb.shape(),
            rhs: h_prime.shape(),
        });
    }
    if fp.w1.rows() != tok_emb.cols() {
        return Err(Error::Dimension {
            op: "fuse(E, W1)",
            lhs: tok_emb.shape(),
            rhs: fp.w1.shape(),
        });
    }
    Ok(())
}

pub fn fuse(tok_emb: &Matrix, aligned: &AlignedSemantics, fp: &FusionParams) -> Result<Matrix> {
    Ok(fuse_fwd(tok_emb, &aligned.h_prime, fp)?.0)
}

pub fn fuse_fwd(tok_emb: &Matrix, h_prime: &Matrix, fp: &FusionParams) -> Result<(Matrix, FusionCache)> {
    check_widths(tok_emb, h_prime, fp)?;
    Ok(fuse_fwd_parts(tok_emb, h_prime, [&fp.w1, &fp.b1, &fp.w2, &fp.b2]))
}

/// Unchecked forward over borrowed `[W1, b1, W2, b2]`.
pub(crate) fn fuse_fwd_parts(tok_emb: &Matrix, h_prime: &Matrix, w: [&Matrix; 4]) -> (Matrix, FusionCache) {
    let mut x = tok_emb.clone();
    x.add_assign(h_prime);
    let mut pre = mm(&x, w[0]);
    pre.add_row_vector(w[1]);
    let u = map(&pre, relu);
    let mut e = mm(&u, w[2]);
    e.add_row_vector(w[3]);
    (e, FusionCache { x, pre, u })
}

pub fn fuse_bwd(cache: &FusionCache, fp: &FusionParams, de: &Matrix) -> FusionGrads {
    fuse_bwd_parts(cache, &fp.w1, &fp.w2, de)
}

pub(crate) fn fuse_bwd_parts(cache: &FusionCache, w1: &Matrix, w2: &Matrix, de: &Matrix) -> FusionGrads {
    let dw2 = mm_tn(&cache.u, de);
    let b2 = de.sum_rows();
    let du = mm_nt(de, w2);
    let dpre = map_grad(&cache.pre, &du, relu_grad);
    let dw1 = mm_tn(&cache.x, &dpre);
    let b1 = dpre.sum_rows();
    let input = mm_nt(&dpre, w1);
    FusionGrads {
        w1: dw1,
        b1,
        w2: dw2,
        b2,
        input,
    }
}
