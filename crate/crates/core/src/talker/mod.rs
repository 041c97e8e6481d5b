//! The mask-predictor transformer ("talker"): token embedding (with a MASK
//! token), additive semantic fusion, a block-causal pre-norm attention
//! stack and a vocabulary head.

mod checkpoint;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::ndcompute::BoolMask;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{check_gradients, ForwardCache, Talker, TalkerGrads};

/// Token id space: data tokens `0..data_tokens`, then MASK, EOS, PAD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub mask: u32,
    pub eos: u32,
    pub pad: u32,
}

impl Vocabulary {
    pub fn with_data_tokens(data_tokens: usize) -> Self {
        let base = data_tokens as u32;
        Self {
            size: data_tokens + 3,
            mask: base,
            eos: base + 1,
            pad: base + 2,
        }
    }

    pub fn data_tokens(&self) -> usize {
        self.size - 3
    }

    pub fn is_data(&self, tok: u32) -> bool {
        tok != self.mask && tok != self.eos && tok != self.pad && (tok as usize) < self.size
    }

    pub fn validate(&self) -> Result<()> {
        let ids = [self.mask, self.eos, self.pad];
        if ids.iter().any(|&i| i as usize >= self.size) {
            return param_err("vocab", "special ids must be below the vocabulary size");
        }
        if self.mask == self.eos || self.mask == self.pad || self.eos == self.pad {
            return param_err("vocab", "special ids must be distinct");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TalkerConfig {
    pub vocab: Vocabulary,
    /// Size of the source (semantic) token table.
    pub source_vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub fusion_ff: usize,
    /// Default block size for attention masking and anchors.
    pub block_size: usize,
    /// Semantic anchors per block.
    pub anchors: usize,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
}

impl Default for TalkerConfig {
    fn default() -> Self {
        Self {
            vocab: Vocabulary::with_data_tokens(64),
            source_vocab: 32,
            d_model: 64,
            heads: 4,
            layers: 4,
            d_ff: 256,
            fusion_ff: 256,
            block_size: 16,
            anchors: 4,
            max_len: 256,
        }
    }
}

impl TalkerConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return param_err("heads", format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.layers == 0 || self.d_ff == 0 || self.fusion_ff == 0 {
            return param_err("layers", "layer count and widths must be positive");
        }
        if self.block_size == 0 || self.anchors == 0 || self.anchors > self.block_size {
            return param_err("anchors", format!("need 1 ≤ Q={} ≤ B={}", self.anchors, self.block_size));
        }
        if self.max_len == 0 || self.source_vocab == 0 {
            return param_err("max_len", "positional table and source table must be non-empty");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Tensor shapes in checkpoint order; see [`Talker::tensor_names`].
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let d = self.d_model;
        let mut s = vec![
            (self.vocab.size, d),
            (self.max_len, d),
            (self.source_vocab, d),
            (d, self.fusion_ff),
            (1, self.fusion_ff),
            (self.fusion_ff, d),
            (1, d),
        ];
        for _ in 0..self.layers {
            s.extend([
                (1, d),
                (1, d),
                (d, d),
                (d, d),
                (d, d),
                (d, d),
                (1, d),
                (1, d),
                (d, self.d_ff),
                (1, self.d_ff),
                (self.d_ff, d),
                (1, d),
            ]);
        }
        s.extend([(1, d), (1, d), (d, self.vocab.size), (1, self.vocab.size)]);
        s
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Full visibility within a block, causal across blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCausalMask {
    pub len: usize,
    pub block: usize,
    pub mask: BoolMask,
}

pub fn build_block_causal_mask(len: usize, block: usize) -> BlockCausalMask {
    let b = block.max(1);
    BlockCausalMask {
        len,
        block: b,
        mask: BoolMask::new(len, |i, j| j / b <= i / b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_one_is_causal() {
        let m = build_block_causal_mask(6, 1);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.mask.visible(i, j), j <= i);
            }
        }
    }

    #[test]
    fn block_equal_len_is_full() {
        let m = build_block_causal_mask(5, 5);
        assert!((0..5).all(|i| m.mask.row(i).iter().all(|&b| b)));
    }

    #[test]
    fn four_by_two() {
        let m = build_block_causal_mask(4, 2);
        assert_eq!(m.mask.row(0), &[true, true, false, false]);
        assert_eq!(m.mask.row(1), &[true, true, false, false]);
        assert_eq!(m.mask.row(2), &[true, true, true, true]);
        assert_eq!(m.mask.row(3), &[true, true, true, true]);
    }

    #[test]
    fn vocabulary_specials_are_distinct() {
        let v = Vocabulary::with_data_tokens(64);
        v.validate().unwrap();
        assert_eq!(v.size, 67);
        assert!(!v.is_data(v.mask) && !v.is_data(v.eos) && v.is_data(0));
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = TalkerConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_follows_config() {
        let cfg = TalkerConfig::default();
        let d = 64;
        let per_layer = 4 * d * d + 2 * d * 256 + 256 + d + 4 * d;
        let expect = 67 * d + 256 * d + 32 * d + (d * 256 + 256 + 256 * d + d) + 4 * per_layer + 2 * d + d * 67 + 67;
        assert_eq!(cfg.param_count(), expect);
    }
}
