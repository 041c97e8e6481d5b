use super::{build_block_causal_mask, TalkerConfig};
use crate::error::{Error, Result};
use crate::masking::partition;
use crate::ndcompute::{
    grad_check, masked_cross_entropy, GradCheckConfig, GradCheckReport, gelu, gelu_grad, layer_norm_bwd, layer_norm_fwd, map, map_grad, masked_attention_bwd,
    masked_attention_fwd, mm, mm_nt, mm_tn_acc, AttentionCache, LayerNormCache, Matrix,
    RngState,
};
use crate::semantics::{align, build_anchors, fuse_bwd_parts, fuse_fwd_parts, AlignedSemantics, FusionCache, SemanticStates};

// Tensor layout, in checkpoint order.
const TOK: usize = 0;
const POS: usize = 1;
const SRC: usize = 2;
const FUS_W1: usize = 3;
const FUS_B1: usize = 4;
const FUS_W2: usize = 5;
const FUS_B2: usize = 6;
const LAYER0: usize = 7;
const PER_LAYER: usize = 12;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const FF1_W: usize = 8;
const FF1_B: usize = 9;
const FF2_W: usize = 10;
const FF2_B: usize = 11;

const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

/// Gradients in the same layout as [`Talker::tensors`].
pub type TalkerGrads = Vec<Matrix>;

#[derive(Clone, Debug, PartialEq)]
pub struct Talker {
    cfg: TalkerConfig,
    tensors: Vec<Matrix>,
}

struct LayerCache {
    ln1: LayerNormCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Indexed `segment * heads + head`.
    probs: Vec<AttentionCache>,
    o: Matrix,
    ln2: LayerNormCache,
    b: Matrix,
    f1: Matrix,
    g: Matrix,
}

/// Activations kept from a forward pass for [`Talker::backward`].
pub struct ForwardCache {
    segments: Vec<(usize, usize)>,
    tokens: Vec<u32>,
    fusion: FusionCache,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    xf: Matrix,
}

impl ForwardCache {
    /// `(start row, length)` of every sequence in the packed batch.
    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }
}

impl Talker {
    /// Randomly initialized talker; identical seeds give identical weights.
    pub fn new(cfg: TalkerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(seed);
        let d = cfg.d_model as f64;
        let residual_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let mut tensors = Vec::new();
        for (i, (r, c)) in cfg.param_shapes().into_iter().enumerate() {
            let std = match i {
                TOK | POS | SRC => 0.5,
                FUS_W1 => (2.0 / d).sqrt(),
                FUS_W2 => 1.0 / (cfg.fusion_ff as f64).sqrt(),
                FUS_B1 | FUS_B2 => 0.0,
                i if i >= LAYER0 && i < LAYER0 + PER_LAYER * cfg.layers => {
                    match (i - LAYER0) % PER_LAYER {
                        WQ | WK | WV => 1.0 / d.sqrt(),
                        WO => residual_scale / d.sqrt(),
                        FF1_W => 1.0 / d.sqrt(),
                        FF2_W => residual_scale / (cfg.d_ff as f64).sqrt(),
                        LN1_G | LN2_G => -1.0,
                        _ => 0.0,
                    }
                }
                i if i == LAYER0 + PER_LAYER * cfg.layers => -1.0, // final norm gain
                i if i == LAYER0 + PER_LAYER * cfg.layers + 2 => 0.02, // head
                _ => 0.0,
            };
            let m = if std < 0.0 {
                Matrix::filled(r, c, 1.0)
            } else if std == 0.0 {
                Matrix::zeros(r, c)
            } else {
                let data = (0..r * c).map(|_| std * rng.normal()).collect();
                Matrix::from_vec(r, c, data)?
            };
            tensors.push(m);
        }
        Ok(Self { cfg, tensors })
    }

    /// Wraps loaded tensors, checking them against the config's layout.
    pub fn from_tensors(cfg: TalkerConfig, tensors: Vec<Matrix>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Mismatch(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (s, t)) in shapes.iter().zip(&tensors).enumerate() {
            if *s != t.shape() {
                return Err(Error::Mismatch(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    Self::tensor_name(&cfg, i),
                    t.shape(),
                    s
                )));
            }
        }
        Ok(Self { cfg, tensors })
    }

    pub fn config(&self) -> &TalkerConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn zero_grads(&self) -> TalkerGrads {
        self.tensors.iter().map(Matrix::zeros_like).collect()
    }

    pub fn tensor_name(cfg: &TalkerConfig, i: usize) -> String {
        let head = LAYER0 + PER_LAYER * cfg.layers;
        match i {
            TOK => "tok_emb".into(),
            POS => "pos_emb".into(),
            SRC => "src_emb".into(),
            FUS_W1 => "fusion.w1".into(),
            FUS_B1 => "fusion.b1".into(),
            FUS_W2 => "fusion.w2".into(),
            FUS_B2 => "fusion.b2".into(),
            i if i < head => format!("layer{}.{}", (i - LAYER0) / PER_LAYER, LAYER_NAMES[(i - LAYER0) % PER_LAYER]),
            i => ["final_ln.gain", "final_ln.bias", "head.w", "head.b"]
                .get(i - head)
                .map_or_else(|| format!("tensor{i}"), |s| s.to_string()),
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.tensors.len()).map(|i| Self::tensor_name(&self.cfg, i)).collect()
    }

    /// Order-independent digest of all weights (FNV-1a over bit patterns).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn head_base(&self) -> usize {
        LAYER0 + PER_LAYER * self.cfg.layers
    }

    fn layer(&self, l: usize, which: usize) -> &Matrix {
        &self.tensors[LAYER0 + PER_LAYER * l + which]
    }

    /// Semantic vectors for a source sequence (rows of the source table).
    pub fn semantic_states(&self, source: &[u32]) -> Result<SemanticStates> {
        let table = &self.tensors[SRC];
        let mut h = Matrix::zeros(source.len(), self.cfg.d_model);
        for (m, &s) in source.iter().enumerate() {
            if s as usize >= table.rows() {
                return Err(Error::Input(format!(
                    "source token {s} outside source vocabulary {}",
                    table.rows()
                )));
            }
            h.row_mut(m).copy_from_slice(table.row(s as usize));
        }
        Ok(SemanticStates::new(h))
    }

    /// Builds `h'` of length `len` for `source`, with `q` anchors per block
    /// of size `block`.
    pub fn condition(&self, source: &[u32], len: usize, block: usize, q: usize) -> Result<AlignedSemantics> {
        let h = self.semantic_states(source)?;
        let anchors = build_anchors(&partition(len, block)?, q)?;
        align(&h, &anchors, len)
    }

    fn check_sequence(&self, tokens: &[u32], h_prime: &Matrix) -> Result<()> {
        if tokens.len() != h_prime.rows() {
            return Err(Error::Dimension {
                op: "talker forward(tokens, h')",
                lhs: (tokens.len(), self.cfg.d_model),
                rhs: h_prime.shape(),
            });
        }
        if h_prime.cols() != self.cfg.d_model {
            return Err(Error::Dimension {
                op: "talker forward(h' width)",
                lhs: (tokens.len(), self.cfg.d_model),
                rhs: h_prime.shape(),
            });
        }
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds positional table {}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab.size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary {}",
                self.cfg.vocab.size
            )));
        }
        Ok(())
    }

    /// Logits (`T x V`) for one sequence under block-causal attention with
    /// the given block size.
    pub fn forward(&self, tokens: &[u32], aligned: &AlignedSemantics, block: usize) -> Result<Matrix> {
        Ok(self.forward_batch(&[(tokens, &aligned.h_prime)], block)?.0)
    }

    /// Forward over several sequences packed row-wise. Returns packed logits
    /// and the cache needed by [`Talker::backward`].
    pub fn forward_batch(&self, seqs: &[(&[u32], &Matrix)], block: usize) -> Result<(Matrix, ForwardCache)> {
        if block == 0 {
            return Err(Error::Parameter {
                name: "B",
                reason: "block size must be at least 1".into(),
            });
        }
        let d = self.cfg.d_model;
        let mut segments = Vec::with_capacity(seqs.len());
        let mut rows = 0;
        for (tokens, hp) in seqs {
            self.check_sequence(tokens, hp)?;
            segments.push((rows, tokens.len()));
            rows += tokens.len();
        }
        let mut tokens = Vec::with_capacity(rows);
        let mut emb = Matrix::zeros(rows, d);
        let mut h_prime = Matrix::zeros(rows, d);
        for ((toks, hp), &(start, _)) in seqs.iter().zip(&segments) {
            for (i, &t) in toks.iter().enumerate() {
                emb.row_mut(start + i).copy_from_slice(self.tensors[TOK].row(t as usize));
                h_prime.row_mut(start + i).copy_from_slice(hp.row(i));
            }
            tokens.extend_from_slice(toks);
        }
        let fusion_w = [
            &self.tensors[FUS_W1],
            &self.tensors[FUS_B1],
            &self.tensors[FUS_W2],
            &self.tensors[FUS_B2],
        ];
        let (mut x, fusion) = fuse_fwd_parts(&emb, &h_prime, fusion_w);
        for &(start, len) in &segments {
            for i in 0..len {
                for (xv, p) in x.row_mut(start + i).iter_mut().zip(self.tensors[POS].row(i)) {
                    *xv += p;
                }
            }
        }

        let masks: Vec<_> = segments
            .iter()
            .map(|&(_, len)| build_block_causal_mask(len, block))
            .collect();
        let heads = self.cfg.heads;
        let hd = self.cfg.head_dim();
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let (a, ln1) = layer_norm_fwd(&x, self.layer(l, LN1_G), self.layer(l, LN1_B));
            let q = mm(&a, self.layer(l, WQ));
            let k = mm(&a, self.layer(l, WK));
            let v = mm(&a, self.layer(l, WV));
            let mut o = Matrix::zeros(rows, d);
            let mut probs = Vec::with_capacity(segments.len() * heads);
            for (s, &(start, len)) in segments.iter().enumerate() {
                let (qs, ks, vs) = (q.slice_rows(start, len), k.slice_rows(start, len), v.slice_rows(start, len));
                for h in 0..heads {
                    let (out, cache) = masked_attention_fwd(
                        &qs.slice_cols(h * hd, hd),
                        &ks.slice_cols(h * hd, hd),
                        &vs.slice_cols(h * hd, hd),
                        &masks[s].mask,
                    )?;
                    for i in 0..len {
                        o.row_mut(start + i)[h * hd..(h + 1) * hd].copy_from_slice(out.row(i));
                    }
                    probs.push(cache);
                }
            }
            x.add_assign(&mm(&o, self.layer(l, WO)));
            let (b, ln2) = layer_norm_fwd(&x, self.layer(l, LN2_G), self.layer(l, LN2_B));
            let mut f1 = mm(&b, self.layer(l, FF1_W));
            f1.add_row_vector(self.layer(l, FF1_B));
            let g = map(&f1, gelu);
            let mut f2 = mm(&g, self.layer(l, FF2_W));
            f2.add_row_vector(self.layer(l, FF2_B));
            x.add_assign(&f2);
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                b,
                f1,
                g,
            });
        }
        let hb = self.head_base();
        let (xf, lnf) = layer_norm_fwd(&x, &self.tensors[hb], &self.tensors[hb + 1]);
        let mut logits = mm(&xf, &self.tensors[hb + 2]);
        logits.add_row_vector(&self.tensors[hb + 3]);
        if !logits.is_finite() {
            return Err(Error::NonFinite("talker logits".into()));
        }
        Ok((
            logits,
            ForwardCache {
                segments,
                tokens,
                fusion,
                layers,
                lnf,
                xf,
            },
        ))
    }

    /// Backpropagates packed `dlogits`. Returns weight gradients and the
    /// gradient of the packed `h'` input (for the semantic source table).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> (TalkerGrads, Matrix) {
        let mut grads = self.zero_grads();
        let hb = self.head_base();
        mm_tn_acc(&cache.xf, dlogits, &mut grads[hb + 2]);
        grads[hb + 3].add_assign(&dlogits.sum_rows());
        let dxf = mm_nt(dlogits, &self.tensors[hb + 2]);
        let (gf, rest) = grads.split_at_mut(hb + 1);
        let mut dx = layer_norm_bwd(&cache.lnf, &self.tensors[hb], &dxf, &mut gf[hb], &mut rest[0]);

        let heads = self.cfg.heads;
        let hd = self.cfg.head_dim();
        for l in (0..self.cfg.layers).rev() {
            let lc = &cache.layers[l];
            let base = LAYER0 + PER_LAYER * l;
            // Feed-forward sublayer.
            mm_tn_acc(&lc.g, &dx, &mut grads[base + FF2_W]);
            grads[base + FF2_B].add_assign(&dx.sum_rows());
            let dg = mm_nt(&dx, self.layer(l, FF2_W));
            let df1 = map_grad(&lc.f1, &dg, gelu_grad);
            mm_tn_acc(&lc.b, &df1, &mut grads[base + FF1_W]);
            grads[base + FF1_B].add_assign(&df1.sum_rows());
            let db = mm_nt(&df1, self.layer(l, FF1_W));
            {
                let (lo, hi) = grads.split_at_mut(base + LN2_B);
                let dxn = layer_norm_bwd(&lc.ln2, self.layer(l, LN2_G), &db, &mut lo[base + LN2_G], &mut hi[0]);
                dx.add_assign(&dxn);
            }
            // Attention sublayer.
            mm_tn_acc(&lc.o, &dx, &mut grads[base + WO]);
            let d_o = mm_nt(&dx, self.layer(l, WO));
            let mut dq = Matrix::zeros_like(&lc.q);
            let mut dk = Matrix::zeros_like(&lc.k);
            let mut dv = Matrix::zeros_like(&lc.v);
            for (s, &(start, len)) in cache.segments.iter().enumerate() {
                let (qs, ks, vs) = (lc.q.slice_rows(start, len), lc.k.slice_rows(start, len), lc.v.slice_rows(start, len));
                let dos = d_o.slice_rows(start, len);
                for h in 0..heads {
                    let (gq, gk, gv) = masked_attention_bwd(
                        &qs.slice_cols(h * hd, hd),
                        &ks.slice_cols(h * hd, hd),
                        &vs.slice_cols(h * hd, hd),
                        &lc.probs[s * heads + h],
                        &dos.slice_cols(h * hd, hd),
                    );
                    for i in 0..len {
                        dq.row_mut(start + i)[h * hd..(h + 1) * hd].copy_from_slice(gq.row(i));
                        dk.row_mut(start + i)[h * hd..(h + 1) * hd].copy_from_slice(gk.row(i));
                        dv.row_mut(start + i)[h * hd..(h + 1) * hd].copy_from_slice(gv.row(i));
                    }
                }
            }
            mm_tn_acc(&lc.a, &dq, &mut grads[base + WQ]);
            mm_tn_acc(&lc.a, &dk, &mut grads[base + WK]);
            mm_tn_acc(&lc.a, &dv, &mut grads[base + WV]);
            let mut da = mm_nt(&dq, self.layer(l, WQ));
            da.add_assign(&mm_nt(&dk, self.layer(l, WK)));
            da.add_assign(&mm_nt(&dv, self.layer(l, WV)));
            {
                let (lo, hi) = grads.split_at_mut(base + LN1_B);
                let dxn = layer_norm_bwd(&lc.ln1, self.layer(l, LN1_G), &da, &mut lo[base + LN1_G], &mut hi[0]);
                dx.add_assign(&dxn);
            }
        }

        for &(start, len) in &cache.segments {
            for i in 0..len {
                for (g, v) in grads[POS].row_mut(i).iter_mut().zip(dx.row(start + i)) {
                    *g += v;
                }
            }
        }
        let fg = fuse_bwd_parts(&cache.fusion, &self.tensors[FUS_W1], &self.tensors[FUS_W2], &dx);
        grads[FUS_W1].add_assign(&fg.w1);
        grads[FUS_B1].add_assign(&fg.b1);
        grads[FUS_W2].add_assign(&fg.w2);
        grads[FUS_B2].add_assign(&fg.b2);
        for (r, &t) in cache.tokens.iter().enumerate() {
            for (g, v) in grads[TOK].row_mut(t as usize).iter_mut().zip(fg.input.row(r)) {
                *g += v;
            }
        }
        (grads, fg.input)
    }

    /// Routes the gradient of one sequence's `h'` back into the source table.
    pub fn accumulate_source_grad(
        &self,
        grads: &mut TalkerGrads,
        source: &[u32],
        aligned: &AlignedSemantics,
        d_h_prime: &Matrix,
    ) {
        for &(pos, m) in &aligned.assigned {
            let s = source[m] as usize;
            for (g, v) in grads[SRC].row_mut(s).iter_mut().zip(d_h_prime.row(pos)) {
                *g += v;
            }
        }
    }

    /// Zeroes the vocabulary head so every prediction is uniform.
    pub fn zero_head(&mut self) {
        let hb = self.head_base();
        self.tensors[hb + 2].fill(0.0);
        self.tensors[hb + 3].fill(0.0);
    }
}

/// Central-difference check of every talker tensor (source table included)
/// on a masked cross-entropy over random tokens of length `len`.
pub fn check_gradients(cfg: TalkerConfig, len: usize, seed: u64, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let base = Talker::new(cfg, seed)?;
    let mut rng = RngState::derive(seed, 0x6763);
    let n_src = (len.div_ceil(cfg.block_size) * cfg.anchors).max(1);
    let source: Vec<u32> = (0..n_src).map(|_| rng.below(cfg.source_vocab) as u32).collect();
    let data = cfg.vocab.data_tokens().max(1);
    let tokens: Vec<u32> = (0..len)
        .map(|_| if rng.unit() < 0.5 { cfg.vocab.mask } else { rng.below(data) as u32 })
        .collect();
    let targets: Vec<u32> = (0..len).map(|_| rng.below(data) as u32).collect();
    let mask: Vec<usize> = (0..len).filter(|_| rng.unit() < 0.6).collect();
    let (block, q) = (cfg.block_size, cfg.anchors);
    let loss_of = |t: &Talker| -> f64 {
        let al = t.condition(&source, len, block, q).expect("conditioning");
        let logits = t.forward(&tokens, &al, block).expect("forward");
        masked_cross_entropy(&logits, &targets, &mask).expect("loss").loss
    };
    let al = base.condition(&source, len, block, q)?;
    let (logits, cache) = base.forward_batch(&[(&tokens, &al.h_prime)], block)?;
    let lg = masked_cross_entropy(&logits, &targets, &mask)?;
    let (mut grads, dhp) = base.backward(&cache, &lg.grad);
    base.accumulate_source_grad(&mut grads, &source, &al, &dhp);
    let mut params = base.tensors().to_vec();
    grad_check(
        &mut params,
        &grads,
        |p| loss_of(&Talker::from_tensors(cfg, p.to_vec()).expect("same layout")),
        gc,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcompute::GradCheckConfig;
    use crate::talker::Vocabulary;

    fn small_cfg() -> TalkerConfig {
        TalkerConfig {
            vocab: Vocabulary::with_data_tokens(8),
            source_vocab: 6,
            d_model: 16,
            heads: 2,
            layers: 2,
            d_ff: 32,
            fusion_ff: 32,
            block_size: 4,
            anchors: 2,
            max_len: 32,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Talker::new(small_cfg(), 3).unwrap();
        let b = Talker::new(small_cfg(), 3).unwrap();
        let c = Talker::new(small_cfg(), 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.tensors().iter().map(|t| t.data().len()).sum::<usize>(), small_cfg().param_count());
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let t = Talker::new(small_cfg(), 0).unwrap();
        let al = t.condition(&[1], 4, 4, 2).unwrap();
        assert!(matches!(t.forward(&[0, 1, 99, 2], &al, 4), Err(Error::Input(_))));
    }

    #[test]
    fn fully_masked_input_is_finite() {
        let t = Talker::new(small_cfg(), 0).unwrap();
        let m = t.config().vocab.mask;
        let al = t.condition(&[1, 2, 3], 12, 4, 2).unwrap();
        assert!(t.forward(&[m; 12], &al, 4).unwrap().is_finite());
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let mut t = Talker::new(small_cfg(), 0).unwrap();
        t.zero_head();
        let al = t.condition(&[1], 8, 4, 2).unwrap();
        let logits = t.forward(&[0; 8], &al, 4).unwrap();
        let p = crate::ndcompute::softmax_rows(&logits);
        let v = t.config().vocab.size as f64;
        assert!(p.data().iter().all(|&x| (x - 1.0 / v).abs() < 1e-15));
    }

    #[test]
    fn batched_forward_equals_individual() {
        let t = Talker::new(small_cfg(), 5).unwrap();
        let a1 = t.condition(&[1, 2], 8, 4, 2).unwrap();
        let a2 = t.condition(&[3, 4, 5], 12, 4, 2).unwrap();
        let s1: Vec<u32> = vec![0, 1, 2, 3, 8, 8, 4, 5];
        let s2: Vec<u32> = vec![7, 6, 5, 4, 3, 2, 1, 0, 8, 8, 8, 9];
        let (packed, _) = t.forward_batch(&[(&s1, &a1.h_prime), (&s2, &a2.h_prime)], 4).unwrap();
        let l1 = t.forward(&s1, &a1, 4).unwrap();
        let l2 = t.forward(&s2, &a2, 4).unwrap();
        assert!(packed.slice_rows(0, 8).max_abs_diff(&l1) < 1e-12);
        assert!(packed.slice_rows(8, 12).max_abs_diff(&l2) < 1e-12);
    }

    #[test]
    fn full_talker_gradient_check() {
        let gc = GradCheckConfig {
            coords_per_tensor: 6,
            ..Default::default()
        };
        let report = check_gradients(small_cfg(), 20, 11, &gc).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
        assert!(report.checked > 100);
    }
}
