use mdm_core::decode::{decode_block, decode_source, DecodeConfig};
use mdm_core::ndcompute::RngState;
use mdm_core::talker::{Talker, TalkerConfig, Vocabulary};
use mdm_core::train::schedule;
use proptest::prelude::*;

fn talker(seed: u64, block: usize) -> Talker {
    let cfg = TalkerConfig {
        vocab: Vocabulary::with_data_tokens(7),
        source_vocab: 5,
        d_model: 8,
        heads: 2,
        layers: 1,
        d_ff: 16,
        fusion_ff: 16,
        block_size: block,
        anchors: 1,
        max_len: 24,
    };
    Talker::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn earlier_logits_ignore_later_blocks(seed in 0u64..8, block in 1usize..6, len in 2usize..24, k_frac in 0.0f64..1.0, salt in any::<u64>()) {
        let t = talker(seed, block);
        let v = t.config().vocab;
        let mut rng = RngState::new(salt);
        let k = ((len.div_ceil(block)) as f64 * k_frac) as usize;
        let boundary = ((k + 1) * block).min(len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.below(v.size) as u32).collect();
        let al = t.condition(&[1, 2, 3], len, block, 1).unwrap();
        let mut other = tokens.clone();
        let mut h = al.h_prime.clone();
        for p in boundary..len {
            other[p] = rng.below(v.size) as u32;
            h.row_mut(p).iter_mut().for_each(|x| *x = rng.normal());
        }
        let (a, _) = t.forward_batch(&[(&tokens, &al.h_prime)], block).unwrap();
        let (b, _) = t.forward_batch(&[(&other, &h)], block).unwrap();
        for r in 0..boundary {
            prop_assert!(a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn block_trace_follows_schedule(seed in 0u64..8, block in 1usize..8, steps in 1usize..10) {
        let t = talker(seed, block);
        let cfg = DecodeConfig { block_size: block, steps, max_blocks: 2, eos: t.config().vocab.eos };
        let al = t.condition(&[0, 4], 2 * block, block, 1).unwrap();
        let (out, trace) = decode_block(&t, &[], &al, &cfg).unwrap();
        prop_assert_eq!(trace.forward_passes, steps);
        let counts: Vec<usize> = trace.steps.iter().map(|s| s.revealed.len()).collect();
        prop_assert_eq!(counts, schedule(block, steps).unwrap());
        prop_assert!(out.iter().all(|&x| x != t.config().vocab.mask && x != t.config().vocab.pad));
        for s in &trace.steps {
            prop_assert!(s.confidences.iter().all(|&c| c > 0.0 && c <= 1.0));
        }
    }

    #[test]
    fn streamed_output_is_prefix_stable(seed in 0u64..8, steps in 1usize..5, src in proptest::collection::vec(0u32..5, 1..6)) {
        let t = talker(seed, 4);
        let eos = t.config().vocab.eos;
        let short = DecodeConfig { block_size: 4, steps, max_blocks: 2, eos };
        let long = DecodeConfig { max_blocks: 5, ..short };
        let a = decode_source(&t, &src, 1, &short).unwrap();
        let b = decode_source(&t, &src, 1, &long).unwrap();
        prop_assert_eq!(&b.tokens[..a.tokens.len()], &a.tokens[..]);
        if let Some(p) = b.tokens.iter().position(|&x| x == eos) {
            prop_assert_eq!(p + 1, b.tokens.len());
        }
    }
}
