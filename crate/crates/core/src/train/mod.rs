//! Masked-diffusion training and iterative self-distillation.
//!
//! Stage two fits the talker with a masked cross-entropy under Global
//! Bernoulli masking. Stage three freezes a copy of that checkpoint as a
//! teacher, lets it unmask a corrupted sequence over `K` confidence-ordered
//! steps while recording its logits at each position's reveal, and trains
//! the student to match those logits from the corrupted input in one pass.

mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::masking::{partition, MaskSet};
use crate::ndcompute::{kl_rows, masked_cross_entropy, softmax_into, KlDirection, Matrix};
use crate::semantics::AlignedSemantics;
use crate::talker::{Talker, Vocabulary};

pub use trainer::{
    moving_average, train_distill, train_mdm, train_mdm_until, write_curve_csv, CurvePoint, TrainConfig, TrainOutcome,
};

/// Positions to reveal at step `j` (1-based) of `k` when `remaining` are
/// still masked: `⌈remaining / (k − j + 1)⌉`.
pub fn schedule_step(remaining: usize, j: usize, k: usize) -> Result<usize> {
    if k == 0 {
        return param_err("K", "need at least one step");
    }
    if j == 0 || j > k {
        return param_err("j", format!("step {j} outside 1..={k}"));
    }
    Ok(remaining.div_ceil(k - j + 1))
}

/// Full reveal plan for `total` masked positions over `k` steps.
pub fn schedule(total: usize, k: usize) -> Result<Vec<usize>> {
    let mut left = total;
    (1..=k)
        .map(|j| {
            let n = schedule_step(left, j, k)?;
            left -= n;
            Ok(n)
        })
        .collect()
}

/// Largest softmax probability of a logit row.
pub fn confidence(row: &[f64]) -> f64 {
    let mut p = vec![0.0; row.len()];
    softmax_into(row, &mut p);
    p.into_iter().fold(0.0, f64::max)
}

/// Argmax over tokens that may be emitted (MASK and PAD excluded), with its
/// softmax probability and the row entropy. Ties go to the lowest id.
pub(crate) fn pick_token(row: &[f64], vocab: &Vocabulary, probs: &mut Vec<f64>) -> (u32, f64, f64) {
    probs.resize(row.len(), 0.0);
    softmax_into(row, probs);
    let mut best = (u32::MAX, f64::NEG_INFINITY);
    for (i, &p) in probs.iter().enumerate() {
        let id = i as u32;
        if id == vocab.mask || id == vocab.pad {
            continue;
        }
        if p > best.1 {
            best = (id, p);
        }
    }
    let entropy = -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    (best.0, best.1, entropy)
}

/// Selects up to `n` of `candidates` by descending confidence, lowest
/// position first on ties.
pub(crate) fn top_by_confidence(mut candidates: Vec<(usize, f64)>, n: usize) -> Vec<(usize, f64)> {
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(n);
    candidates
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Teacher refinement steps.
    pub steps: usize,
    pub tau: f64,
    pub alpha: f64,
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            tau: 2.0,
            alpha: 0.7,
            kl_direction: KlDirection::Reverse,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return param_err("K", "teacher needs at least one step");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return param_err("tau", format!("temperature must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return param_err("alpha", format!("weight {} outside [0, 1]", self.alpha));
        }
        Ok(())
    }
}

/// Teacher logits recorded at the moment each masked position was revealed.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub logits: Matrix,
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub targets: TeacherTargets,
    /// Sequence after every masked position has been filled.
    pub sequence: Vec<u32>,
    /// 1-based step at which each position was revealed.
    pub reveal_step: Vec<Option<usize>>,
    pub forward_passes: usize,
}

pub struct RolloutInput<'a> {
    pub corrupted: &'a [u32],
    pub mask: &'a MaskSet,
    pub aligned: &'a AlignedSemantics,
}

/// Teacher rollout for one sequence.
pub fn teacher_rollout(
    teacher: &Talker,
    corrupted: &[u32],
    mask: &MaskSet,
    aligned: &AlignedSemantics,
    block: usize,
    cfg: &DistillConfig,
) -> Result<Rollout> {
    let input = RolloutInput {
        corrupted,
        mask,
        aligned,
    };
    Ok(teacher_rollout_batch(teacher, &[input], block, cfg)?.pop().expect("one rollout"))
}

/// Rollouts for several sequences sharing each teacher forward pass.
pub fn teacher_rollout_batch(
    teacher: &Talker,
    inputs: &[RolloutInput<'_>],
    block: usize,
    cfg: &DistillConfig,
) -> Result<Vec<Rollout>> {
    cfg.validate()?;
    let vocab = teacher.config().vocab;
    let v = vocab.size;
    let mut states: Vec<Vec<u32>> = Vec::with_capacity(inputs.len());
    let mut outs: Vec<Rollout> = Vec::with_capacity(inputs.len());
    let mut parts = Vec::with_capacity(inputs.len());
    for inp in inputs {
        if inp.mask.is_empty() {
            return Err(Error::Input("teacher rollout needs a non-empty mask".into()));
        }
        let t = inp.corrupted.len();
        if let Some(&p) = inp.mask.positions().last() {
            if p >= t {
                return Err(Error::Input(format!("masked position {p} outside length {t}")));
            }
        }
        let mut state = inp.corrupted.to_vec();
        for &p in inp.mask.positions() {
            state[p] = vocab.mask;
        }
        states.push(state);
        parts.push(partition(t, block)?);
        outs.push(Rollout {
            targets: TeacherTargets {
                logits: Matrix::zeros(t, v),
                valid: vec![false; t],
            },
            sequence: Vec::new(),
            reveal_step: vec![None; t],
            forward_passes: 0,
        });
    }
    // Remaining masked positions per sequence and block.
    let mut pending: Vec<Vec<Vec<usize>>> = inputs
        .iter()
        .zip(&parts)
        .map(|(inp, part)| {
            part.blocks()
                .map(|r| inp.mask.positions().iter().copied().filter(|p| r.contains(p)).collect())
                .collect()
        })
        .collect();

    let k = cfg.steps;
    let mut probs = Vec::with_capacity(v);
    for j in 1..=k {
        let seqs: Vec<(&[u32], &Matrix)> = states
            .iter()
            .zip(inputs)
            .map(|(s, inp)| (s.as_slice(), &inp.aligned.h_prime))
            .collect();
        let (logits, cache) = teacher.forward_batch(&seqs, block)?;
        let segments = cache.segments().to_vec();
        drop(cache);
        for (s, &(start, _)) in segments.iter().enumerate() {
            outs[s].forward_passes += 1;
            for blk in pending[s].iter_mut() {
                let n = schedule_step(blk.len(), j, k)?;
                if n == 0 {
                    continue;
                }
                let scored: Vec<(usize, f64)> = blk
                    .iter()
                    .map(|&p| (p, confidence(logits.row(start + p))))
                    .collect();
                for (p, _) in top_by_confidence(scored, n) {
                    let row = logits.row(start + p);
                    let (tok, _, _) = pick_token(row, &vocab, &mut probs);
                    states[s][p] = tok;
                    outs[s].targets.logits.row_mut(p).copy_from_slice(row);
                    outs[s].targets.valid[p] = true;
                    outs[s].reveal_step[p] = Some(j);
                    blk.retain(|&q| q != p);
                }
            }
        }
    }
    for (s, out) in outs.iter_mut().enumerate() {
        if let Some(&p) = pending[s].iter().flatten().next() {
            return Err(Error::Scheduling(format!(
                "position {p} still masked after {k} teacher steps"
            )));
        }
        out.sequence = std::mem::take(&mut states[s]);
    }
    Ok(outs)
}

#[derive(Clone, Debug)]
pub struct DistillLoss {
    pub loss: f64,
    pub kd: f64,
    pub mdm: f64,
    /// Gradient with respect to the student logits.
    pub grad: Matrix,
}

/// `α·KD + (1 − α)·MDM` over the masked positions, both terms averaged over
/// `|M|`; the KD term carries the `τ²` factor.
pub fn distill_loss(
    student: &Matrix,
    teacher: &TeacherTargets,
    mask: &MaskSet,
    targets: &[u32],
    cfg: &DistillConfig,
) -> Result<DistillLoss> {
    cfg.validate()?;
    if teacher.logits.shape() != student.shape() {
        return Err(Error::Dimension {
            op: "distill_loss(student, teacher)",
            lhs: student.shape(),
            rhs: teacher.logits.shape(),
        });
    }
    let mut grad = Matrix::zeros_like(student);
    if mask.is_empty() {
        return Ok(DistillLoss {
            loss: 0.0,
            kd: 0.0,
            mdm: 0.0,
            grad,
        });
    }
    let pos = mask.positions();
    if let Some(&p) = pos.iter().find(|&&p| p >= teacher.valid.len() || !teacher.valid[p]) {
        return Err(Error::Contract(format!("no teacher target recorded for position {p}")));
    }
    let n = pos.len() as f64;
    let kd = kl_rows(
        &student.gather_rows(pos),
        &teacher.logits.gather_rows(pos),
        cfg.tau,
        cfg.kl_direction,
    )?;
    let ce = masked_cross_entropy(student, targets, pos)?;
    let mdm = ce.loss / n;
    let (a, b) = (cfg.alpha, 1.0 - cfg.alpha);
    for (r, &p) in pos.iter().enumerate() {
        let g = grad.row_mut(p);
        for ((gv, kv), cv) in g.iter_mut().zip(kd.grad.row(r)).zip(ce.grad.row(p)) {
            *gv = a * kv + b * cv / n;
        }
    }
    Ok(DistillLoss {
        loss: a * kd.loss + b * mdm,
        kd: kd.loss,
        mdm,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskSet;
    use crate::ndcompute::{grad_check, GradCheckConfig, RngState};
    use crate::talker::TalkerConfig;

    fn tiny_talker(seed: u64) -> Talker {
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
            max_len: 32,
        };
        Talker::new(cfg, seed).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule(16, 4).unwrap(), vec![4, 4, 4, 4]);
        assert_eq!(schedule(5, 4).unwrap(), vec![2, 1, 1, 1]);
        assert_eq!(schedule(3, 8).unwrap(), vec![1, 1, 1, 0, 0, 0, 0, 0]);
        assert!(schedule_step(3, 5, 4).is_err());
        assert!(schedule_step(3, 0, 4).is_err());
    }

    #[test]
    fn confidence_examples() {
        assert!((confidence(&[0.0; 4]) - 0.25).abs() < 1e-15);
        let e10 = 10f64.exp();
        let saturated = confidence(&[10.0, 0.0, 0.0, 0.0]);
        assert!((saturated - e10 / (e10 + 3.0)).abs() < 1e-15);
        assert!(saturated > 0.9998);
        // e^2 / (e^2 + 2)
        let e2 = 2f64.exp();
        assert!((confidence(&[2.0, 0.0, 0.0]) - e2 / (e2 + 2.0)).abs() < 1e-12);
        assert!((confidence(&[2.0, 0.0, 0.0]) - 0.78699).abs() < 1e-5);
    }

    #[test]
    fn ties_go_to_lowest_position() {
        let picked = top_by_confidence(vec![(5, 0.5), (2, 0.5), (9, 0.7), (1, 0.1)], 2);
        assert_eq!(picked, vec![(9, 0.7), (2, 0.5)]);
    }

    fn rollout_fixture(seed: u64) -> (Talker, Vec<u32>, MaskSet, AlignedSemantics) {
        let t = tiny_talker(seed);
        let al = t.condition(&[1, 2, 3, 4], 12, 4, 2).unwrap();
        let mut rng = RngState::new(seed);
        let seq: Vec<u32> = (0..12).map(|_| rng.below(6) as u32).collect();
        // Block 1 untouched.
        let mask = MaskSet::from_positions(vec![0, 1, 3, 8, 9, 10, 11]);
        (t, seq, mask, al)
    }

    #[test]
    fn single_step_rollout_records_one_pass() {
        let (t, seq, mask, al) = rollout_fixture(1);
        let cfg = DistillConfig {
            steps: 1,
            ..Default::default()
        };
        let r = teacher_rollout(&t, &seq, &mask, &al, 4, &cfg).unwrap();
        let mut corrupted = seq.clone();
        for &p in mask.positions() {
            corrupted[p] = t.config().vocab.mask;
        }
        let logits = t.forward(&corrupted, &al, 4).unwrap();
        for p in 0..12 {
            assert_eq!(r.targets.valid[p], mask.contains(p));
            if mask.contains(p) {
                assert!(r.targets.logits.row(p).iter().zip(logits.row(p)).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        assert_eq!(r.forward_passes, 1);
        assert_eq!(&r.sequence[4..8], &seq[4..8]);
    }

    #[test]
    fn recorded_logits_come_from_reveal_step() {
        let (t, seq, mask, al) = rollout_fixture(2);
        let cfg = DistillConfig {
            steps: 4,
            ..Default::default()
        };
        let r = teacher_rollout(&t, &seq, &mask, &al, 4, &cfg).unwrap();
        assert_eq!(r.forward_passes, 4);
        let m = t.config().vocab.mask;
        let mut differs = false;
        for &p in mask.positions() {
            let j = r.reveal_step[p].unwrap();
            // Rebuild the state the teacher saw at step j.
            let state: Vec<u32> = (0..12)
                .map(|q| match r.reveal_step[q] {
                    Some(s) if s >= j => m,
                    Some(_) => r.sequence[q],
                    None => seq[q],
                })
                .collect();
            let at_j = t.forward(&state, &al, 4).unwrap();
            assert!(r.targets.logits.row(p).iter().zip(at_j.row(p)).all(|(a, b)| (a - b).abs() < 1e-12));
            let mut final_state = r.sequence.clone();
            final_state[p] = m;
            let late = t.forward(&final_state, &al, 4).unwrap();
            differs |= late.row(p).iter().zip(at_j.row(p)).any(|(a, b)| (a - b).abs() > 1e-9);
        }
        assert!(differs, "teacher logits never changed across steps");
    }

    #[test]
    fn rollout_masked_set_shrinks_every_step() {
        let (t, seq, mask, al) = rollout_fixture(3);
        let cfg = DistillConfig::default();
        let r = teacher_rollout(&t, &seq, &mask, &al, 4, &cfg).unwrap();
        let mut left = mask.len();
        for j in 1..=4 {
            let n = r.reveal_step.iter().filter(|s| **s == Some(j)).count();
            if left > 0 {
                assert!(n > 0);
            }
            left -= n;
        }
        assert_eq!(left, 0);
        let specials = [t.config().vocab.mask, t.config().vocab.pad];
        assert!(r.sequence.iter().all(|tok| !specials.contains(tok)));
    }

    #[test]
    fn empty_mask_rejected_by_rollout() {
        let (t, seq, _, al) = rollout_fixture(0);
        let r = teacher_rollout(&t, &seq, &MaskSet::default(), &al, 4, &DistillConfig::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    fn loss_fixture() -> (Matrix, TeacherTargets, MaskSet, Vec<u32>) {
        let mut rng = RngState::new(7);
        let (t, v) = (6, 5);
        let student = Matrix::from_vec(t, v, (0..t * v).map(|_| rng.normal()).collect()).unwrap();
        let teacher = Matrix::from_vec(t, v, (0..t * v).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let mask = MaskSet::from_positions(vec![0, 2, 3, 5]);
        let valid = (0..t).map(|p| mask.contains(p)).collect();
        let targets = vec![1, 4, 0, 2, 3, 3];
        (student, TeacherTargets { logits: teacher, valid }, mask, targets)
    }

    #[test]
    fn alpha_zero_is_pure_mdm() {
        let (s, z, m, y) = loss_fixture();
        let cfg = DistillConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let l = distill_loss(&s, &z, &m, &y, &cfg).unwrap();
        let ce = masked_cross_entropy(&s, &y, m.positions()).unwrap();
        assert_eq!(l.loss, ce.loss / 4.0);
    }

    #[test]
    fn alpha_one_matching_teacher_is_zero() {
        let (s, mut z, m, y) = loss_fixture();
        z.logits = s.clone();
        let cfg = DistillConfig {
            alpha: 1.0,
            ..Default::default()
        };
        assert!(distill_loss(&s, &z, &m, &y, &cfg).unwrap().loss.abs() < 1e-15);
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let (s, z, m, y) = loss_fixture();
        let cfg = DistillConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(matches!(distill_loss(&s, &z, &m, &y, &cfg), Err(Error::Parameter { .. })));
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let (s, z, m, y) = loss_fixture();
        for dir in [KlDirection::Reverse, KlDirection::Forward] {
            let cfg = DistillConfig {
                kl_direction: dir,
                ..Default::default()
            };
            let analytic = distill_loss(&s, &z, &m, &y, &cfg).unwrap().grad;
            let mut params = vec![s.clone()];
            let report = grad_check(
                &mut params,
                &[analytic],
                |p| distill_loss(&p[0], &z, &m, &y, &cfg).unwrap().loss,
                &GradCheckConfig {
                    coords_per_tensor: 30,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "{dir:?}: {report:?}");
        }
    }

    #[test]
    fn schedule_exhausts_small_grid() {
        for r in 0..=64 {
            for k in 1..=8 {
                let plan = schedule(r, k).unwrap();
                assert_eq!(plan.iter().sum::<usize>(), r);
                let mut left = r;
                for n in plan {
                    assert_eq!(n == 0, left == 0);
                    left -= n;
                }
            }
        }
    }
}
