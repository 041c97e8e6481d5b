use std::io::Write;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{distill_loss, teacher_rollout_batch, DistillConfig, RolloutInput, TeacherTargets};
use crate::error::{param_err, Error, Result};
use crate::masking::{partition, sample_mask, MaskSet, MaskingConfig};
use crate::ndcompute::{masked_cross_entropy, AdamW, AdamWConfig, Matrix, RngState};
use crate::semantics::AlignedSemantics;
use crate::synth::SamplePair;
use crate::talker::{Talker, TalkerGrads};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub block_size: usize,
    pub anchors: usize,
    pub masking: MaskingConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Log every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            block_size: 16,
            anchors: 4,
            masking: MaskingConfig::global_bernoulli(),
            optimizer: AdamWConfig::default(),
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return param_err("steps", "step budget and batch size must be positive");
        }
        if self.block_size == 0 || self.anchors == 0 || self.anchors > self.block_size {
            return param_err("anchors", format!("need 1 ≤ Q={} ≤ B={}", self.anchors, self.block_size));
        }
        self.masking.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub kd_loss: f64,
    pub mdm_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones when `aborted` is set.
    pub talker: Talker,
    pub curve: Vec<CurvePoint>,
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.curve.iter().map(|p| p.loss).collect()
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], mut w: W) -> Result<()> {
    writeln!(w, "step,loss,kd_loss,mdm_loss")?;
    for p in curve {
        writeln!(w, "{},{},{},{}", p.step, p.loss, p.kd_loss, p.mdm_loss)?;
    }
    Ok(())
}

/// One training example after corruption.
struct Prepared {
    target: Vec<u32>,
    corrupted: Vec<u32>,
    mask: MaskSet,
    aligned: AlignedSemantics,
    sample: usize,
}

fn prepare_batch(
    talker: &Talker,
    data: &[SamplePair],
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<Prepared>> {
    let vocab = talker.config().vocab;
    let mut pick = RngState::derive2(cfg.seed, step as u64, 0);
    (0..cfg.batch_size)
        .map(|i| {
            let sample = pick.below(data.len());
            let pair = &data[sample];
            let target = pair.padded_target(cfg.block_size, vocab.eos);
            let part = partition(target.len(), cfg.block_size)?;
            let mut rng = RngState::derive2(cfg.seed, step as u64, i as u64 + 1);
            let mask = sample_mask(&part, &cfg.masking, &mut rng);
            let mut corrupted = target.clone();
            for &p in mask.positions() {
                corrupted[p] = vocab.mask;
            }
            let aligned = talker.condition(&pair.source, target.len(), cfg.block_size, cfg.anchors)?;
            Ok(Prepared {
                target,
                corrupted,
                mask,
                aligned,
                sample,
            })
        })
        .collect()
}

struct StepResult {
    loss: f64,
    kd: f64,
    mdm: f64,
    grads: TalkerGrads,
}

/// Packed forward on the corrupted inputs, per-example loss gradients from
/// `loss_of`, then one backward pass.
fn batch_step<F>(talker: &Talker, data: &[SamplePair], batch: &[Prepared], block: usize, mut loss_of: F) -> Result<StepResult>
where
    F: FnMut(usize, &Matrix, &Prepared) -> Result<(f64, f64, f64, Matrix)>,
{
    let seqs: Vec<(&[u32], &Matrix)> = batch.iter().map(|b| (b.corrupted.as_slice(), &b.aligned.h_prime)).collect();
    let (logits, cache) = talker.forward_batch(&seqs, block)?;
    let mut dlogits = Matrix::zeros_like(&logits);
    let scale = 1.0 / batch.len() as f64;
    let (mut loss, mut kd, mut mdm) = (0.0, 0.0, 0.0);
    for (i, (b, &(start, len))) in batch.iter().zip(cache.segments()).enumerate() {
        let rows = logits.slice_rows(start, len);
        let (l, k, m, g) = loss_of(i, &rows, b)?;
        loss += l * scale;
        kd += k * scale;
        mdm += m * scale;
        for r in 0..len {
            for (d, v) in dlogits.row_mut(start + r).iter_mut().zip(g.row(r)) {
                *d = v * scale;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let (mut grads, dhp) = talker.backward(&cache, &dlogits);
    for (b, &(start, len)) in batch.iter().zip(cache.segments()) {
        let source = &data[b.sample].source;
        talker.accumulate_source_grad(&mut grads, source, &b.aligned, &dhp.slice_rows(start, len));
    }
    Ok(StepResult { loss, kd, mdm, grads })
}

fn mdm_loss(logits: &Matrix, b: &Prepared) -> Result<(f64, f64, f64, Matrix)> {
    if b.mask.is_empty() {
        return Ok((0.0, 0.0, 0.0, Matrix::zeros_like(logits)));
    }
    let mut ce = masked_cross_entropy(logits, &b.target, b.mask.positions())?;
    let n = b.mask.len() as f64;
    ce.grad.data_mut().iter_mut().for_each(|g| *g /= n);
    Ok((ce.loss / n, 0.0, ce.loss / n, ce.grad))
}

/// Called after every `every` completed steps with the step count so far;
/// returning `true` ends training.
type Hook<'a> = Option<(usize, &'a mut dyn FnMut(usize, &Talker) -> Result<bool>)>;

fn run<F>(mut talker: Talker, data: &[SamplePair], cfg: &TrainConfig, label: &str, mut step_fn: F, mut hook: Hook<'_>) -> Result<TrainOutcome>
where
    F: FnMut(&Talker, &[Prepared]) -> Result<StepResult>,
{
    cfg.validate()?;
    if data.is_empty() {
        return param_err("dataset", "no training samples");
    }
    let mut opt = AdamW::new(cfg.optimizer, talker.tensors().iter().map(Matrix::shape));
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = prepare_batch(&talker, data, cfg, step)?;
        let last_good = talker.clone();
        let res = step_fn(&talker, &batch).and_then(|r| {
            opt.step(talker.tensors_mut(), &r.grads)?;
            if talker.tensors().iter().all(Matrix::is_finite) {
                Ok(r)
            } else {
                Err(Error::NonFinite("parameters after update".into()))
            }
        });
        match res {
            Ok(r) => {
                curve.push(CurvePoint {
                    step,
                    loss: r.loss,
                    kd_loss: r.kd,
                    mdm_loss: r.mdm,
                });
                if cfg.log_every > 0 && step % cfg.log_every == 0 {
                    info!("{label} step {step}: loss {:.4} (kd {:.4}, mdm {:.4})", r.loss, r.kd, r.mdm);
                }
                if let Some((every, f)) = hook.as_mut() {
                    if (step + 1) % *every == 0 && f(step + 1, &talker)? {
                        info!("{label} stopped by hook after {} steps", step + 1);
                        break;
                    }
                }
            }
            Err(e @ Error::NonFinite(_)) => {
                warn!("{label} aborted at step {step}: {e}");
                return Ok(TrainOutcome {
                    talker: last_good,
                    curve,
                    aborted: Some(format!("step {step}: {e}")),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        talker,
        curve,
        aborted: None,
    })
}

/// Masked-diffusion training from `talker` for `cfg.steps` optimizer steps.
pub fn train_mdm(talker: Talker, data: &[SamplePair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    mdm_run(talker, data, cfg, None)
}

/// [`train_mdm`] with `stop` consulted after every `every` steps; training
/// ends early (keeping the current weights) once it returns `true`.
pub fn train_mdm_until<S>(talker: Talker, data: &[SamplePair], cfg: &TrainConfig, every: usize, mut stop: S) -> Result<TrainOutcome>
where
    S: FnMut(usize, &Talker) -> Result<bool>,
{
    if every == 0 {
        return param_err("every", "check interval must be at least 1");
    }
    mdm_run(talker, data, cfg, Some((every, &mut stop)))
}

fn mdm_run(talker: Talker, data: &[SamplePair], cfg: &TrainConfig, hook: Hook<'_>) -> Result<TrainOutcome> {
    let block = cfg.block_size;
    run(
        talker,
        data,
        cfg,
        "mdm",
        |t, batch| batch_step(t, data, batch, block, |_, logits, b| mdm_loss(logits, b)),
        hook,
    )
}

/// Self-distillation: the input checkpoint is frozen as the teacher and a
/// copy of it is trained on the combined loss.
pub fn train_distill(
    checkpoint: &Talker,
    data: &[SamplePair],
    distill: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    distill.validate()?;
    let teacher = checkpoint;
    let before = teacher.checksum();
    let block = cfg.block_size;
    let out = run(checkpoint.clone(), data, cfg, "distill", |student, batch| {
        let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].mask.is_empty()).collect();
        // Teacher conditioning uses its own (frozen) source table.
        let teacher_aligned: Vec<AlignedSemantics> = live
            .iter()
            .map(|&i| teacher.condition(&data[batch[i].sample].source, batch[i].target.len(), block, cfg.anchors))
            .collect::<Result<_>>()?;
        let inputs: Vec<RolloutInput<'_>> = live
            .iter()
            .zip(&teacher_aligned)
            .map(|(&i, al)| RolloutInput {
                corrupted: &batch[i].corrupted,
                mask: &batch[i].mask,
                aligned: al,
            })
            .collect();
        let rollouts = teacher_rollout_batch(teacher, &inputs, block, distill)?;
        let mut targets: Vec<Option<TeacherTargets>> = vec![None; batch.len()];
        for (&i, r) in live.iter().zip(rollouts) {
            targets[i] = Some(r.targets);
        }
        batch_step(student, data, batch, block, |i, logits, b| match &targets[i] {
            None => Ok((0.0, 0.0, 0.0, Matrix::zeros_like(logits))),
            Some(z) => {
                let l = distill_loss(logits, z, &b.mask, &b.target, distill)?;
                Ok((l.loss, l.kd, l.mdm, l.grad))
            }
        })
    }, None)?;
    if teacher.checksum() != before {
        return Err(Error::Contract("teacher parameters changed during distillation".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, TaskSpec};
    use crate::talker::{TalkerConfig, Vocabulary};

    fn setup() -> (Talker, Vec<SamplePair>, TrainConfig) {
        let spec = TaskSpec {
            source_vocab: 6,
            data_vocab: 8,
            upsample: 2,
            ..Default::default()
        };
        let data = gen_dataset(&spec, 40, (2, 5), &mut RngState::new(1)).unwrap();
        let tcfg = TalkerConfig {
            vocab: Vocabulary::with_data_tokens(8),
            source_vocab: 6,
            d_model: 16,
            heads: 2,
            layers: 1,
            d_ff: 32,
            fusion_ff: 32,
            block_size: 4,
            anchors: 2,
            max_len: 16,
        };
        let cfg = TrainConfig {
            steps: 30,
            batch_size: 4,
            block_size: 4,
            anchors: 2,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        (Talker::new(tcfg, 0).unwrap(), data, cfg)
    }

    #[test]
    fn equal_seeds_give_equal_curves() {
        let (t, data, cfg) = setup();
        let a = train_mdm(t.clone(), &data, &cfg).unwrap();
        let b = train_mdm(t, &data, &cfg).unwrap();
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.talker, b.talker);
    }

    #[test]
    fn empty_masks_contribute_nothing() {
        let (t, data, mut cfg) = setup();
        cfg.masking.global = crate::masking::RatioRange::pinned(0.0);
        cfg.steps = 3;
        let out = train_mdm(t.clone(), &data, &cfg).unwrap();
        assert!(out.losses().iter().all(|&l| l == 0.0));
        assert_eq!(out.talker, t);
    }

    #[test]
    fn alpha_zero_distill_matches_mdm_curve() {
        let (t, data, mut cfg) = setup();
        cfg.masking = MaskingConfig::hierarchical();
        cfg.steps = 8;
        let d = DistillConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let a = train_distill(&t, &data, &d, &cfg).unwrap();
        let b = train_mdm(t, &data, &cfg).unwrap();
        assert_eq!(a.losses(), b.losses());
        assert!(a.curve.iter().any(|p| p.kd_loss > 0.0));
    }

    #[test]
    fn distill_leaves_teacher_untouched() {
        let (t, data, mut cfg) = setup();
        cfg.masking = MaskingConfig::hierarchical();
        cfg.steps = 4;
        let before = t.checksum();
        let out = train_distill(&t, &data, &DistillConfig::default(), &cfg).unwrap();
        assert_eq!(t.checksum(), before);
        assert_ne!(out.talker.checksum(), before);
    }

    #[test]
    fn non_finite_loss_returns_last_good() {
        let (mut t, data, mut cfg) = setup();
        cfg.steps = 2;
        t.tensors_mut()[0].data_mut()[0] = f64::NAN;
        let out = train_mdm(t.clone(), &data, &cfg);
        let out = out.unwrap();
        assert!(out.aborted.is_some());
        assert!(out.curve.is_empty());
        assert_eq!(out.talker.checksum(), t.checksum());
    }

    #[test]
    fn hook_stops_early_and_matches_prefix() {
        let (t, data, cfg) = setup();
        let full = train_mdm(t.clone(), &data, &TrainConfig { steps: 10, ..cfg }).unwrap();
        let mut seen = Vec::new();
        let early = train_mdm_until(t.clone(), &data, &cfg, 5, |s, _| {
            seen.push(s);
            Ok(s >= 10)
        })
        .unwrap();
        assert_eq!(seen, vec![5, 10]);
        assert_eq!(early.curve.len(), 10);
        assert_eq!(early.talker.checksum(), full.talker.checksum());
        assert!(train_mdm_until(t, &data, &cfg, 0, |_, _| Ok(false)).is_err());
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn curve_csv_header() {
        let mut buf = Vec::new();
        write_curve_csv(
            &[CurvePoint {
                step: 0,
                loss: 1.5,
                kd_loss: 0.5,
                mdm_loss: 1.0,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,kd_loss,mdm_loss\n0,1.5,0.5,1\n");
    }
}
