//! Evaluation metrics, step sweeps, first-chunk latency and uncertainty
//! profiles.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{decode_block, decode_stream, DecodeConfig, DecodeOutput};
use crate::error::{param_err, Error, Result};
use crate::synth::{load_corpus, token_error_rate, SamplePair};
use crate::talker::{load_checkpoint, Talker};

/// Decoding settings shared by every evaluation in a report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub block_size: usize,
    pub anchors: usize,
    pub max_blocks: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            block_size: 16,
            anchors: 4,
            max_blocks: 8,
        }
    }
}

impl EvalSettings {
    pub fn decode_config(&self, talker: &Talker, steps: usize) -> DecodeConfig {
        DecodeConfig {
            block_size: self.block_size,
            steps,
            max_blocks: self.max_blocks,
            eos: talker.config().vocab.eos,
        }
    }

    fn anchors_for_block(&self) -> usize {
        self.anchors.min(self.block_size)
    }
}

/// Mean confidence and entropy of positions revealed at one diffusion step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepUncertainty {
    pub step: usize,
    pub positions: usize,
    pub mean_confidence: f64,
    pub mean_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub steps: usize,
    pub samples: usize,
    /// Corpus-level rate: total edits over total reference tokens.
    pub err_rate: f64,
    pub edits: usize,
    pub ref_tokens: usize,
    pub tokens_generated: usize,
    pub truncated_by_limit: usize,
    pub uncertainty: Vec<StepUncertainty>,
    pub outputs: Vec<Vec<u32>>,
    pub wall_seconds: f64,
}

fn decode_one(talker: &Talker, source: &[u32], settings: &EvalSettings, steps: usize) -> Result<DecodeOutput> {
    let cfg = settings.decode_config(talker, steps);
    let len = cfg.max_len().min(talker.config().max_len);
    let aligned = talker.condition(source, len, cfg.block_size, settings.anchors_for_block())?;
    decode_stream(talker, &aligned, &cfg, |_, _| {})
}

fn accumulate_uncertainty(acc: &mut Vec<(usize, f64, f64)>, out: &DecodeOutput) {
    for b in &out.trace.blocks {
        for (j, s) in b.steps.iter().enumerate() {
            if acc.len() <= j {
                acc.resize(j + 1, (0, 0.0, 0.0));
            }
            acc[j].0 += s.revealed.len();
            acc[j].1 += s.confidences.iter().sum::<f64>();
            acc[j].2 += s.entropies.iter().sum::<f64>();
        }
    }
}

fn finish_uncertainty(acc: Vec<(usize, f64, f64)>) -> Vec<StepUncertainty> {
    acc.into_iter()
        .enumerate()
        .map(|(j, (n, c, e))| StepUncertainty {
            step: j + 1,
            positions: n,
            mean_confidence: if n > 0 { c / n as f64 } else { f64::NAN },
            mean_entropy: if n > 0 { e / n as f64 } else { f64::NAN },
        })
        .collect()
}

/// Decodes every sample at `steps` diffusion steps per block and scores the
/// output against the reference targets.
pub fn evaluate(talker: &Talker, eval: &[SamplePair], settings: &EvalSettings, steps: usize) -> Result<Evaluation> {
    if eval.is_empty() {
        return param_err("eval", "evaluation set is empty");
    }
    let mut acc = Vec::new();
    let (mut edits, mut ref_tokens, mut generated, mut limited) = (0, 0, 0, 0);
    let mut outputs = Vec::with_capacity(eval.len());
    let start = Instant::now();
    for s in eval {
        let out = decode_one(talker, &s.source, settings, steps)?;
        let e = token_error_rate(&out.tokens, &s.target);
        edits += e.edits;
        ref_tokens += e.ref_len;
        generated += out.tokens.len();
        limited += usize::from(out.truncated_by_limit);
        accumulate_uncertainty(&mut acc, &out);
        outputs.push(out.tokens);
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    Ok(Evaluation {
        steps,
        samples: eval.len(),
        err_rate: edits as f64 / ref_tokens.max(1) as f64,
        edits,
        ref_tokens,
        tokens_generated: generated,
        truncated_by_limit: limited,
        uncertainty: finish_uncertainty(acc),
        outputs,
        wall_seconds,
    })
}

/// Per-step mean confidence and entropy over positions revealed at that
/// step, across all blocks of all inputs.
pub fn uncertainty_profile(
    talker: &Talker,
    sources: &[Vec<u32>],
    settings: &EvalSettings,
    steps: usize,
) -> Result<Vec<StepUncertainty>> {
    if steps == 0 {
        return param_err("steps", "need at least one diffusion step");
    }
    let mut acc = Vec::new();
    for s in sources {
        accumulate_uncertainty(&mut acc, &decode_one(talker, s, settings, steps)?);
    }
    Ok(finish_uncertainty(acc))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

/// Wall-clock stage times (seconds) until the first block is available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstChunkReport {
    pub steps: usize,
    pub nondeterministic: bool,
    pub semantics: MeanStd,
    pub talker: MeanStd,
    pub post: MeanStd,
    pub total: MeanStd,
    /// Medians of the same samples, less sensitive to scheduler noise.
    pub median_semantics: f64,
    pub median_talker: f64,
    pub median_post: f64,
    pub samples: usize,
}

impl FirstChunkReport {
    /// `|Σ stages − total| / total` on the means.
    pub fn accounting_gap(&self) -> f64 {
        let sum = self.semantics.mean + self.talker.mean + self.post.mean;
        (sum - self.total.mean).abs() / self.total.mean.max(f64::MIN_POSITIVE)
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times the pipeline up to the first emitted block for every input,
/// `repetitions` times after `warmup` untimed passes.
pub fn first_chunk_breakdown(
    talker: &Talker,
    steps: usize,
    sources: &[Vec<u32>],
    settings: &EvalSettings,
    repetitions: usize,
    warmup: usize,
) -> Result<FirstChunkReport> {
    if sources.is_empty() || repetitions == 0 {
        return param_err("repetitions", "need at least one input and one repetition");
    }
    let cfg = settings.decode_config(talker, steps);
    cfg.validate()?;
    let len = cfg.max_len().min(talker.config().max_len);
    let q = settings.anchors_for_block();
    let (mut sem, mut tal, mut post, mut total) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rep in 0..warmup + repetitions {
        for src in sources {
            let t0 = Instant::now();
            let aligned = talker.condition(src, len, cfg.block_size, q)?;
            let t1 = Instant::now();
            let (block, _) = decode_block(talker, &[], &aligned, &cfg)?;
            let t2 = Instant::now();
            let cut = block.iter().position(|&t| t == cfg.eos).map_or(block.len(), |p| p + 1);
            let mut text = String::with_capacity(4 * cut);
            for t in &block[..cut] {
                writeln!(text, "{t}").expect("write to String");
            }
            std::hint::black_box(&text);
            let t3 = Instant::now();
            if rep >= warmup {
                sem.push((t1 - t0).as_secs_f64());
                tal.push((t2 - t1).as_secs_f64());
                post.push((t3 - t2).as_secs_f64());
                total.push((t3 - t0).as_secs_f64());
            }
        }
    }
    Ok(FirstChunkReport {
        steps,
        nondeterministic: true,
        semantics: MeanStd::of(&sem),
        talker: MeanStd::of(&tal),
        post: MeanStd::of(&post),
        total: MeanStd::of(&total),
        median_semantics: median(&mut sem.clone()),
        median_talker: median(&mut tal.clone()),
        median_post: median(&mut post.clone()),
        samples: total.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCheckpoint {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub checkpoints: Vec<NamedCheckpoint>,
    pub steps: Vec<usize>,
    pub eval_set: PathBuf,
    /// Use at most this many evaluation samples (0 = all).
    pub eval_limit: usize,
    pub seed: u64,
    pub repetitions: usize,
    pub warmup: usize,
    pub settings: EvalSettings,
    /// Seconds of output attributed to one token for the RTF analog.
    pub nominal_token_seconds: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            steps: vec![16, 8, 4, 2, 1],
            eval_set: PathBuf::new(),
            eval_limit: 0,
            seed: 0,
            repetitions: 1,
            warmup: 2,
            settings: EvalSettings::default(),
            nominal_token_seconds: 0.04,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.steps.contains(&0) {
            return param_err("steps", "step list must be non-empty and positive");
        }
        if self.repetitions == 0 {
            return param_err("repetitions", "must be at least 1");
        }
        if !(self.nominal_token_seconds > 0.0) {
            return param_err("nominal_token_seconds", "must be positive");
        }
        Ok(())
    }
}

/// Wall-clock derived fields; not reproducible between runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub nondeterministic: bool,
    pub wall_seconds: MeanStd,
    pub tps: MeanStd,
    pub rtf_analog: MeanStd,
    pub latency_stage_semantics: MeanStd,
    pub latency_stage_talker: MeanStd,
    pub latency_stage_post: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub checkpoint: String,
    pub steps: usize,
    pub samples: usize,
    pub tokens: usize,
    pub err_rate: f64,
    pub conf_step1: f64,
    pub entropy_step1: f64,
    pub uncertainty: Vec<StepUncertainty>,
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub nominal_token_seconds: f64,
    pub repetitions: usize,
    pub warmup: usize,
    pub settings: EvalSettings,
    pub rows: Vec<Metrics>,
}

pub const CSV_HEADER: &str = "checkpoint,K,tps,rtf_analog,err_rate,conf_step1,entropy_step1,latency_stage_semantics,latency_stage_talker,latency_stage_post";

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let t = &r.timing;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.checkpoint,
                r.steps,
                t.tps.mean,
                t.rtf_analog.mean,
                r.err_rate,
                r.conf_step1,
                r.entropy_step1,
                t.latency_stage_semantics.mean,
                t.latency_stage_talker.mean,
                t.latency_stage_post.mean
            )
            .expect("write to String");
        }
        s
    }

    pub fn find(&self, checkpoint: &str, steps: usize) -> Option<&Metrics> {
        self.rows.iter().find(|r| r.checkpoint == checkpoint && r.steps == steps)
    }
}

/// Checks that a checkpoint can decode the evaluation set under the
/// experiment's settings.
pub fn check_compatible(name: &str, talker: &Talker, eval: &[SamplePair], settings: &EvalSettings, width: Option<usize>) -> Result<()> {
    let cfg = talker.config();
    let mut bad = Vec::new();
    let max_tok = eval.iter().flat_map(|s| s.target.iter()).copied().max().unwrap_or(0);
    if max_tok as usize >= cfg.vocab.size {
        bad.push(format!("V (checkpoint {} < corpus token {max_tok})", cfg.vocab.size));
    }
    let max_src = eval.iter().flat_map(|s| s.source.iter()).copied().max().unwrap_or(0);
    if max_src as usize >= cfg.source_vocab {
        bad.push(format!("source_vocab (checkpoint {} < corpus source {max_src})", cfg.source_vocab));
    }
    if cfg.block_size != settings.block_size {
        bad.push(format!("B (checkpoint {} vs experiment {})", cfg.block_size, settings.block_size));
    }
    if let Some(d) = width {
        if cfg.d_model != d {
            bad.push(format!("d (checkpoint {} vs {d})", cfg.d_model));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(format!("{name}: {}", bad.join(", "))))
    }
}

/// Step sweep over in-memory checkpoints.
pub fn sweep(
    models: &[(&str, &Talker)],
    eval: &[SamplePair],
    cfg: &ExperimentConfig,
) -> Result<SweepReport> {
    cfg.validate()?;
    let width = models.first().map(|m| m.1.config().d_model);
    for (name, t) in models {
        check_compatible(name, t, eval, &cfg.settings, width)?;
    }
    let sources: Vec<Vec<u32>> = eval.iter().map(|s| s.source.clone()).collect();
    let mut rows = Vec::new();
    for (name, talker) in models {
        for &k in &cfg.steps {
            for _ in 0..cfg.warmup {
                evaluate(talker, &eval[..eval.len().min(4)], &cfg.settings, k)?;
            }
            let mut evals = Vec::with_capacity(cfg.repetitions);
            for _ in 0..cfg.repetitions {
                evals.push(evaluate(talker, eval, &cfg.settings, k)?);
            }
            let first = &evals[0];
            if evals.iter().any(|e| e.outputs != first.outputs) {
                return Err(Error::Contract(format!("{name} K={k}: repeated decodes disagree")));
            }
            let wall: Vec<f64> = evals.iter().map(|e| e.wall_seconds).collect();
            let tps: Vec<f64> = evals.iter().map(|e| e.tokens_generated as f64 / e.wall_seconds).collect();
            let rtf: Vec<f64> = evals
                .iter()
                .map(|e| e.wall_seconds / (e.tokens_generated.max(1) as f64 * cfg.nominal_token_seconds))
                .collect();
            let fc = first_chunk_breakdown(talker, k, &sources, &cfg.settings, cfg.repetitions, 0)?;
            let step1 = first.uncertainty.first().copied();
            rows.push(Metrics {
                checkpoint: name.to_string(),
                steps: k,
                samples: first.samples,
                tokens: first.tokens_generated,
                err_rate: first.err_rate,
                conf_step1: step1.map_or(f64::NAN, |s| s.mean_confidence),
                entropy_step1: step1.map_or(f64::NAN, |s| s.mean_entropy),
                uncertainty: first.uncertainty.clone(),
                timing: Timing {
                    nondeterministic: true,
                    wall_seconds: MeanStd::of(&wall),
                    tps: MeanStd::of(&tps),
                    rtf_analog: MeanStd::of(&rtf),
                    latency_stage_semantics: fc.semantics,
                    latency_stage_talker: fc.talker,
                    latency_stage_post: fc.post,
                },
            });
        }
    }
    Ok(SweepReport {
        nominal_token_seconds: cfg.nominal_token_seconds,
        repetitions: cfg.repetitions,
        warmup: cfg.warmup,
        settings: cfg.settings,
        rows,
    })
}

/// Loads checkpoints and the evaluation corpus named by `cfg`, then sweeps.
pub fn bench_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.checkpoints.is_empty() {
        return param_err("checkpoints", "no checkpoints listed");
    }
    let (_, mut eval) = load_corpus(&cfg.eval_set)?;
    if cfg.eval_limit > 0 {
        eval.truncate(cfg.eval_limit);
    }
    let loaded: Vec<(String, Talker)> = cfg
        .checkpoints
        .iter()
        .map(|c| Ok((c.name.clone(), load_checkpoint(&c.path)?)))
        .collect::<Result<_>>()?;
    let models: Vec<(&str, &Talker)> = loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
    sweep(&models, &eval, cfg)
}

/// Report with every timing field removed, for reproducibility checks.
pub fn strip_timing(report: &SweepReport) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    if let Some(rows) = v.get_mut("rows").and_then(|r| r.as_array_mut()) {
        for r in rows {
            if let Some(o) = r.as_object_mut() {
                o.remove("timing");
            }
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcompute::RngState;
    use crate::synth::{gen_dataset, TaskSpec};
    use crate::talker::{TalkerConfig, Vocabulary};

    fn small() -> (Talker, Vec<SamplePair>, EvalSettings) {
        let spec = TaskSpec {
            source_vocab: 5,
            data_vocab: 6,
            upsample: 2,
            ..Default::default()
        };
        let eval = gen_dataset(&spec, 6, (2, 4), &mut RngState::new(2)).unwrap();
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
        let settings = EvalSettings {
            block_size: 4,
            anchors: 2,
            max_blocks: 4,
        };
        (Talker::new(cfg, 1).unwrap(), eval, settings)
    }

    #[test]
    fn uniform_model_profile_is_analytic() {
        let (mut t, eval, settings) = small();
        t.zero_head();
        let sources: Vec<Vec<u32>> = eval.iter().map(|s| s.source.clone()).collect();
        let prof = uncertainty_profile(&t, &sources, &settings, 2).unwrap();
        let v = t.config().vocab.size as f64;
        for s in &prof {
            assert!((s.mean_confidence - 1.0 / v).abs() < 1e-12);
            assert!((s.mean_entropy - v.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_head_profile_is_certain() {
        let (mut t, eval, settings) = small();
        let n = t.tensors().len();
        t.tensors_mut()[n - 2].fill(0.0);
        t.tensors_mut()[n - 1].data_mut()[0] = 60.0;
        let sources: Vec<Vec<u32>> = eval.iter().map(|s| s.source.clone()).collect();
        let prof = uncertainty_profile(&t, &sources, &settings, 1).unwrap();
        assert!(prof[0].mean_confidence > 1.0 - 1e-12);
        assert!(prof[0].mean_entropy < 1e-20);
    }

    #[test]
    fn stage_sum_matches_total() {
        let (t, eval, settings) = small();
        let sources: Vec<Vec<u32>> = eval.iter().map(|s| s.source.clone()).collect();
        let r = first_chunk_breakdown(&t, 2, &sources, &settings, 3, 1).unwrap();
        assert!(r.accounting_gap() < 0.01, "{r:?}");
        assert_eq!(r.samples, 3 * sources.len());
    }

    #[test]
    fn block_mismatch_names_field() {
        let (t, eval, mut settings) = small();
        settings.block_size = 8;
        let err = check_compatible("base", &t, &eval, &settings, None).unwrap_err().to_string();
        assert!(err.contains("B (checkpoint 4 vs experiment 8)"), "{err}");
    }

    #[test]
    fn sweep_rows_and_csv() {
        let (t, eval, settings) = small();
        let cfg = ExperimentConfig {
            steps: vec![4, 1],
            settings,
            warmup: 0,
            ..Default::default()
        };
        let rep = sweep(&[("base", &t)], &eval, &cfg).unwrap();
        assert_eq!(rep.rows.len(), 2);
        let csv = rep.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(rep.rows.iter().all(|r| r.timing.tps.mean > 0.0));
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["rows"][0]["timing"]["nondeterministic"], true);
    }

    #[test]
    fn mean_std_sample() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
    }
}
