//! Streaming block diffusion decoder.
//!
//! Each new block starts fully masked after the committed prefix and is
//! filled over `K` forward passes, revealing the most confident masked
//! positions at each pass. Completed blocks are final.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::semantics::AlignedSemantics;
use crate::talker::Talker;
use crate::train::{pick_token, schedule_step, top_by_confidence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub block_size: usize,
    pub steps: usize,
    pub max_blocks: usize,
    pub eos: u32,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return param_err("block_size", "must be at least 1");
        }
        if self.steps == 0 {
            return param_err("steps", "need at least one diffusion step per block");
        }
        if self.max_blocks == 0 {
            return param_err("max_blocks", "must be at least 1");
        }
        Ok(())
    }

    /// Longest sequence this decoder can produce.
    pub fn max_len(&self) -> usize {
        self.block_size * self.max_blocks
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// Absolute positions revealed at this step, in reveal order.
    pub revealed: Vec<usize>,
    pub confidences: Vec<f64>,
    pub entropies: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub index: usize,
    pub forward_passes: usize,
    pub steps: Vec<StepTrace>,
    /// Seconds from stream start until this block was complete.
    pub completed_at: f64,
}

impl BlockTrace {
    pub fn revealed_count(&self) -> usize {
        self.steps.iter().map(|s| s.revealed.len()).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub blocks: Vec<BlockTrace>,
    pub total_seconds: f64,
}

impl DecodeTrace {
    pub fn forward_passes(&self) -> usize {
        self.blocks.iter().map(|b| b.forward_passes).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Emitted tokens, ending with EOS unless `truncated_by_limit`.
    pub tokens: Vec<u32>,
    pub truncated_by_limit: bool,
    pub trace: DecodeTrace,
}

/// Fills one block after `prefix`. `aligned` must cover at least
/// `prefix.len() + block_size` positions.
pub fn decode_block(
    talker: &Talker,
    prefix: &[u32],
    aligned: &AlignedSemantics,
    cfg: &DecodeConfig,
) -> Result<(Vec<u32>, BlockTrace)> {
    decode_block_at(talker, prefix, aligned, cfg, None)
}

fn decode_block_at(
    talker: &Talker,
    prefix: &[u32],
    aligned: &AlignedSemantics,
    cfg: &DecodeConfig,
    clock: Option<Instant>,
) -> Result<(Vec<u32>, BlockTrace)> {
    cfg.validate()?;
    let b = cfg.block_size;
    let index = prefix.len() / b;
    if prefix.len() % b != 0 {
        return Err(Error::Input(format!(
            "prefix length {} is not a multiple of the block size {b}",
            prefix.len()
        )));
    }
    let len = prefix.len() + b;
    if aligned.len() < len {
        return Err(Error::Input(format!(
            "conditioning covers {} positions, block needs {len}",
            aligned.len()
        )));
    }
    let vocab = talker.config().vocab;
    let view = aligned.prefix(len);
    let mut seq = prefix.to_vec();
    seq.resize(len, vocab.mask);
    let mut masked: Vec<usize> = (prefix.len()..len).collect();
    let mut trace = BlockTrace {
        index,
        ..Default::default()
    };
    let start = clock.unwrap_or_else(Instant::now);
    let mut probs = Vec::with_capacity(vocab.size);
    for j in 1..=cfg.steps {
        let t0 = Instant::now();
        let n = schedule_step(masked.len(), j, cfg.steps)?;
        if n == 0 {
            // Block already complete; the remaining passes still run so that
            // every block costs exactly K talker evaluations.
            talker.forward(&seq, &view, b)?;
            trace.forward_passes += 1;
            trace.steps.push(StepTrace {
                seconds: t0.elapsed().as_secs_f64(),
                ..Default::default()
            });
            continue;
        }
        let logits = talker.forward(&seq, &view, b)?;
        trace.forward_passes += 1;
        if let Some(&p) = masked.iter().find(|&&p| logits.row(p).iter().any(|v| !v.is_finite())) {
            return Err(Error::Decode {
                block: index,
                reason: format!("non-finite logits at position {p}, step {j}"),
            });
        }
        let mut picks = Vec::with_capacity(masked.len());
        let mut info = Vec::with_capacity(masked.len());
        for &p in &masked {
            let (tok, conf, ent) = pick_token(logits.row(p), &vocab, &mut probs);
            picks.push((p, conf));
            info.push((p, tok, ent));
        }
        let mut step = StepTrace::default();
        for (p, conf) in top_by_confidence(picks, n) {
            let &(_, tok, ent) = info.iter().find(|i| i.0 == p).expect("scored position");
            seq[p] = tok;
            step.revealed.push(p);
            step.confidences.push(conf);
            step.entropies.push(ent);
        }
        masked.retain(|p| !step.revealed.contains(p));
        step.seconds = t0.elapsed().as_secs_f64();
        trace.steps.push(step);
    }
    if !masked.is_empty() {
        return Err(Error::Scheduling(format!("{} positions left masked in block {index}", masked.len())));
    }
    trace.completed_at = start.elapsed().as_secs_f64();
    Ok((seq.split_off(prefix.len()), trace))
}

/// Decodes block by block until a completed block contains EOS or
/// `max_blocks` is reached. `on_block` sees each block once it is final.
pub fn decode_stream<F>(talker: &Talker, aligned: &AlignedSemantics, cfg: &DecodeConfig, mut on_block: F) -> Result<DecodeOutput>
where
    F: FnMut(usize, &[u32]),
{
    cfg.validate()?;
    if aligned.len() < cfg.block_size {
        return Err(Error::Input(format!(
            "conditioning length {} shorter than one block of {}",
            aligned.len(),
            cfg.block_size
        )));
    }
    let start = Instant::now();
    let mut tokens = Vec::new();
    let mut trace = DecodeTrace::default();
    let usable_blocks = cfg.max_blocks.min(aligned.len() / cfg.block_size);
    for k in 0..usable_blocks {
        let (block, bt) = decode_block_at(talker, &tokens, aligned, cfg, Some(start))?;
        on_block(k, &block);
        trace.blocks.push(bt);
        tokens.extend_from_slice(&block);
        if let Some(off) = block.iter().position(|&t| t == cfg.eos) {
            tokens.truncate(k * cfg.block_size + off + 1);
            trace.total_seconds = start.elapsed().as_secs_f64();
            return Ok(DecodeOutput {
                tokens,
                truncated_by_limit: false,
                trace,
            });
        }
    }
    trace.total_seconds = start.elapsed().as_secs_f64();
    Ok(DecodeOutput {
        tokens,
        truncated_by_limit: true,
        trace,
    })
}

/// Convenience: condition on `source` and decode.
pub fn decode_source(talker: &Talker, source: &[u32], anchors: usize, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    let q = anchors.min(cfg.block_size);
    let aligned = talker.condition(source, cfg.max_len().min(talker.config().max_len), cfg.block_size, q)?;
    decode_stream(talker, &aligned, cfg, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcompute::RngState;
    use crate::talker::{TalkerConfig, Vocabulary};

    fn talker() -> Talker {
        let cfg = TalkerConfig {
            vocab: Vocabulary::with_data_tokens(6),
            source_vocab: 5,
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 16,
            fusion_ff: 16,
            block_size: 4,
            anchors: 2,
            max_len: 64,
        };
        Talker::new(cfg, 4).unwrap()
    }

    fn cfg(b: usize, k: usize, max_blocks: usize) -> DecodeConfig {
        DecodeConfig {
            block_size: b,
            steps: k,
            max_blocks,
            eos: Vocabulary::with_data_tokens(6).eos,
        }
    }

    #[test]
    fn k_equal_b_reveals_one_per_step() {
        let t = talker();
        let al = t.condition(&[1, 2], 8, 4, 2).unwrap();
        let (block, tr) = decode_block(&t, &[], &al, &cfg(4, 4, 2)).unwrap();
        assert_eq!(block.len(), 4);
        assert_eq!(tr.steps.len(), 4);
        assert!(tr.steps.iter().all(|s| s.revealed.len() == 1));
    }

    #[test]
    fn single_step_reveals_whole_block() {
        let t = talker();
        let al = t.condition(&[1, 2], 8, 4, 2).unwrap();
        let (_, tr) = decode_block(&t, &[], &al, &cfg(4, 1, 2)).unwrap();
        assert_eq!(tr.forward_passes, 1);
        assert_eq!(tr.steps[0].revealed.len(), 4);
    }

    #[test]
    fn more_steps_than_positions_still_costs_k_passes() {
        let t = talker();
        let al = t.condition(&[1], 8, 4, 2).unwrap();
        let (_, tr) = decode_block(&t, &[], &al, &cfg(4, 7, 2)).unwrap();
        assert_eq!(tr.forward_passes, 7);
        assert_eq!(tr.revealed_count(), 4);
    }

    #[test]
    fn ragged_prefix_rejected() {
        let t = talker();
        let al = t.condition(&[1], 8, 4, 2).unwrap();
        assert!(decode_block(&t, &[0, 1], &al, &cfg(4, 2, 2)).is_err());
    }

    #[test]
    fn truncates_at_earliest_eos() {
        // Bias the head towards EOS so it shows up in the first block.
        let mut t = talker();
        let eos = t.config().vocab.eos as usize;
        let head_b = t.tensors().len() - 1;
        t.tensors_mut()[head_b].data_mut()[eos] = 50.0;
        let al = t.condition(&[1, 2], 16, 4, 2).unwrap();
        let out = decode_stream(&t, &al, &cfg(4, 2, 4), |_, _| {}).unwrap();
        assert!(!out.truncated_by_limit);
        assert_eq!(out.tokens, vec![eos as u32]);
        assert_eq!(out.trace.blocks.len(), 1);
    }

    #[test]
    fn limit_without_eos_is_flagged() {
        let mut t = talker();
        let eos = t.config().vocab.eos as usize;
        let head_b = t.tensors().len() - 1;
        t.tensors_mut()[head_b].data_mut()[eos] = -50.0;
        let al = t.condition(&[1, 2], 12, 4, 2).unwrap();
        let out = decode_stream(&t, &al, &cfg(4, 2, 3), |_, _| {}).unwrap();
        assert!(out.truncated_by_limit);
        assert_eq!(out.tokens.len(), 12);
        assert_eq!(out.trace.forward_passes(), 6);
    }

    #[test]
    fn emitted_blocks_are_stable_prefixes() {
        let mut t = talker();
        let eos = t.config().vocab.eos as usize;
        let head_b = t.tensors().len() - 1;
        t.tensors_mut()[head_b].data_mut()[eos] = -50.0;
        let al = t.condition(&[3, 1, 4], 16, 4, 2).unwrap();
        let mut streamed = Vec::new();
        let long = decode_stream(&t, &al, &cfg(4, 2, 4), |_, b| streamed.extend_from_slice(b)).unwrap();
        let short = decode_stream(&t, &al, &cfg(4, 2, 2), |_, _| {}).unwrap();
        assert_eq!(streamed, long.tokens);
        assert_eq!(&long.tokens[..8], &short.tokens[..]);
    }

    #[test]
    fn decoding_is_deterministic() {
        let t = talker();
        let mut rng = RngState::new(8);
        let src: Vec<u32> = (0..4).map(|_| rng.below(5) as u32).collect();
        let a = decode_source(&t, &src, 2, &cfg(4, 2, 4)).unwrap();
        let b = decode_source(&t, &src, 2, &cfg(4, 2, 4)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let order = |o: &DecodeOutput| -> Vec<Vec<usize>> {
            o.trace.blocks.iter().flat_map(|b| b.steps.iter().map(|s| s.revealed.clone())).collect()
        };
        assert_eq!(order(&a), order(&b));
    }

    #[test]
    fn zero_steps_rejected() {
        let t = talker();
        assert!(matches!(decode_source(&t, &[1], 2, &cfg(4, 0, 2)), Err(Error::Parameter { .. })));
    }
}
