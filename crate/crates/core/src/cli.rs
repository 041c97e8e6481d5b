//! `mdm` command line: data generation, training, decoding, benchmarks and
//! diagnostics. Every subcommand accepts `--config <json>`; flags override
//! the fields they name.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{bench_sweep, first_chunk_breakdown, EvalSettings, ExperimentConfig, NamedCheckpoint};
use crate::decode::{decode_source, DecodeConfig};
use crate::masking::{mask_stats, partition, MaskingConfig, MaskingMode};
use crate::ndcompute::{GradCheckConfig, KlDirection, RngState};
use crate::synth::{gen_dataset, load_corpus, save_corpus, TaskSpec};
use crate::talker::{check_gradients, load_checkpoint, save_checkpoint, Talker, TalkerConfig, Vocabulary};
use crate::train::{train_distill, train_mdm, write_curve_csv, DistillConfig, TrainConfig, TrainOutcome};

#[derive(Debug, Parser)]
#[command(name = "mdm", version, about = "Block-wise masked diffusion token generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target corpus.
    GenData(GenDataArgs),
    /// Masked-diffusion training from scratch or from a checkpoint.
    Train(TrainArgs),
    /// Self-distillation from a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Decode one source sequence block by block.
    Decode(DecodeArgs),
    /// Step sweep over checkpoints with CSV and JSON reports.
    Bench(BenchArgs),
    /// Monte Carlo statistics of a masking sampler.
    Maskstats(MaskstatsArgs),
    /// Compare analytic gradients of a random talker with finite differences.
    Gradcheck(GradcheckArgs),
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe (`mdm ... | head`) is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    let mut w = std::io::stdout().lock();
    match w.write_all(text.as_bytes()).and_then(|_| w.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

// gen-data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataJob {
    pub task: TaskSpec,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenDataJob {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            count: 1000,
            min_len: 4,
            max_len: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output corpus path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    /// Shortest source sequence.
    #[arg(long)]
    min_len: Option<usize>,
    /// Longest source sequence.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-token substitution probability in the targets.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    source_vocab: Option<usize>,
    #[arg(long)]
    data_vocab: Option<usize>,
    /// Target tokens per source token.
    #[arg(long)]
    upsample: Option<usize>,
    #[arg(long)]
    grammar_seed: Option<u64>,
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut job: GenDataJob = read_config(a.config.as_deref())?;
    set(&mut job.count, a.count);
    set(&mut job.min_len, a.min_len);
    set(&mut job.max_len, a.max_len);
    set(&mut job.seed, a.seed);
    set(&mut job.task.noise, a.noise);
    set(&mut job.task.source_vocab, a.source_vocab);
    set(&mut job.task.data_vocab, a.data_vocab);
    set(&mut job.task.upsample, a.upsample);
    set(&mut job.task.grammar_seed, a.grammar_seed);
    job.task.validate()?;
    let mut rng = RngState::new(job.seed);
    let samples = gen_dataset(&job.task, job.count, (job.min_len, job.max_len), &mut rng)?;
    save_corpus(&a.out, &job.task, &samples).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

// train / distill

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJob {
    /// Model shape. Vocabulary sizes are taken from the corpus and block
    /// size and anchors from `train`.
    pub model: TalkerConfig,
    pub train: TrainConfig,
    /// Initialization seed of a fresh model.
    pub init_seed: u64,
}

#[derive(Debug, Args)]
pub struct CommonTrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV path.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// global | hierarchical
    #[arg(long)]
    masking: Option<MaskingMode>,
    #[arg(long)]
    log_every: Option<usize>,
}

impl CommonTrainArgs {
    fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.steps, self.steps);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.seed, self.seed);
        set(&mut t.optimizer.lr, self.lr);
        set(&mut t.masking.mode, self.masking);
        set(&mut t.log_every, self.log_every);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    anchors: Option<usize>,
}

fn finish_training(out: TrainOutcome, path: &Path, curve: Option<&Path>) -> anyhow::Result<()> {
    if let Some(c) = curve {
        let f = fs::File::create(c).with_context(|| format!("writing {}", c.display()))?;
        write_curve_csv(&out.curve, std::io::BufWriter::new(f))?;
    }
    save_checkpoint(&out.talker, path).with_context(|| format!("writing {}", path.display()))?;
    if let Some(reason) = out.aborted {
        bail!("training aborted ({reason}); last finite checkpoint saved to {}", path.display());
    }
    if let Some(last) = out.curve.last() {
        emit(&format!("step {} loss {:.6}\n", last.step, last.loss))?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut job: TrainJob = read_config(a.common.config.as_deref())?;
    a.common.apply(&mut job.train);
    set(&mut job.init_seed, a.init_seed);
    set(&mut job.model.d_model, a.d_model);
    set(&mut job.model.layers, a.layers);
    set(&mut job.model.heads, a.heads);
    set(&mut job.train.block_size, a.block_size);
    set(&mut job.train.anchors, a.anchors);
    let (spec, data) = load_corpus(&a.common.data).with_context(|| format!("reading {}", a.common.data.display()))?;
    let talker = match &a.init {
        Some(p) => load_checkpoint(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let mut m = job.model;
            m.vocab = spec.vocabulary();
            m.source_vocab = spec.source_vocab;
            m.block_size = job.train.block_size;
            m.anchors = job.train.anchors;
            Talker::new(m, job.init_seed)?
        }
    };
    let out = train_mdm(talker, &data, &job.train)?;
    finish_training(out, &a.common.out, a.common.curve.as_deref())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillJob {
    pub train: TrainConfig,
    pub distill: DistillConfig,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Frozen teacher; the student starts as a copy of it.
    #[arg(long)]
    teacher: PathBuf,
    /// Teacher refinement steps.
    #[arg(long)]
    teacher_steps: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// reverse | forward
    #[arg(long)]
    kl: Option<KlDirection>,
}

fn distill(a: DistillArgs) -> anyhow::Result<()> {
    let mut job: DistillJob = read_config(a.common.config.as_deref())?;
    a.common.apply(&mut job.train);
    set(&mut job.distill.steps, a.teacher_steps);
    set(&mut job.distill.tau, a.tau);
    set(&mut job.distill.alpha, a.alpha);
    set(&mut job.distill.kl_direction, a.kl);
    let teacher = load_checkpoint(&a.teacher).with_context(|| format!("reading {}", a.teacher.display()))?;
    job.train.block_size = teacher.config().block_size;
    job.train.anchors = teacher.config().anchors;
    let (_, data) = load_corpus(&a.common.data).with_context(|| format!("reading {}", a.common.data.display()))?;
    let out = train_distill(&teacher, &data, &job.distill, &job.train)?;
    finish_training(out, &a.common.out, a.common.curve.as_deref())
}

// decode

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeJob {
    pub checkpoint: Option<PathBuf>,
    pub steps: usize,
    pub settings: EvalSettings,
}

impl Default for DecodeJob {
    fn default() -> Self {
        Self {
            checkpoint: None,
            steps: 16,
            settings: EvalSettings::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Diffusion steps per block.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long)]
    max_blocks: Option<usize>,
    /// Comma-separated source tokens.
    #[arg(long, value_delimiter = ',', conflicts_with = "data")]
    source: Option<Vec<u32>>,
    /// Take the source from this corpus.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample index within `--data`.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Write the decode trace as JSON here (default: stderr).
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn decode(a: DecodeArgs) -> anyhow::Result<()> {
    let mut job: DecodeJob = read_config(a.config.as_deref())?;
    set(&mut job.steps, a.steps);
    set(&mut job.settings.block_size, a.block_size);
    set(&mut job.settings.anchors, a.anchors);
    set(&mut job.settings.max_blocks, a.max_blocks);
    if a.checkpoint.is_some() {
        job.checkpoint = a.checkpoint;
    }
    // Validate decoding parameters before touching any file.
    let mut cfg = DecodeConfig {
        block_size: job.settings.block_size,
        steps: job.steps,
        max_blocks: job.settings.max_blocks,
        eos: 0,
    };
    cfg.validate()?;
    let Some(ckpt) = job.checkpoint else {
        bail!("no checkpoint given (--checkpoint or `checkpoint` in the config)");
    };
    let talker = load_checkpoint(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    cfg.eos = talker.config().vocab.eos;
    let source = match (a.source, a.data) {
        (Some(s), _) => s,
        (None, Some(path)) => {
            let (_, data) = load_corpus(&path).with_context(|| format!("reading {}", path.display()))?;
            match data.into_iter().nth(a.index) {
                Some(s) => s.source,
                None => bail!("sample index {} out of range in {}", a.index, path.display()),
            }
        }
        (None, None) => bail!("no source given (--source or --data)"),
    };
    let out = decode_source(&talker, &source, job.settings.anchors, &cfg)?;
    let mut text = String::with_capacity(4 * out.tokens.len());
    for t in &out.tokens {
        text.push_str(&format!("{t}\n"));
    }
    emit(&text)?;
    let trace = serde_json::json!({
        "steps": cfg.steps,
        "block_size": cfg.block_size,
        "tokens": out.tokens.len(),
        "truncated_by_limit": out.truncated_by_limit,
        "forward_passes": out.trace.forward_passes(),
        "trace": out.trace,
    });
    match a.trace {
        Some(p) => write_json(&p, &trace)?,
        None => eprintln!("{}", serde_json::to_string(&trace)?),
    }
    Ok(())
}

// bench

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `name=path`, repeatable; replaces the config's checkpoint list.
    #[arg(long = "checkpoint", value_parser = parse_named)]
    checkpoints: Vec<NamedCheckpoint>,
    #[arg(long)]
    eval_set: Option<PathBuf>,
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Comma-separated step list, e.g. 16,8,4,2,1.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    nominal_token_seconds: Option<f64>,
    /// CSV report path (default: stdout).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also emit a first-chunk latency breakdown per (checkpoint, K) here.
    #[arg(long)]
    first_chunk: Option<PathBuf>,
}

fn parse_named(s: &str) -> Result<NamedCheckpoint, String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok(NamedCheckpoint {
            name: n.to_string(),
            path: PathBuf::from(p),
        }),
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let mut cfg: ExperimentConfig = read_config(a.config.as_deref())?;
    if !a.checkpoints.is_empty() {
        cfg.checkpoints = a.checkpoints;
    }
    set(&mut cfg.eval_set, a.eval_set);
    set(&mut cfg.eval_limit, a.eval_limit);
    set(&mut cfg.steps, a.steps);
    set(&mut cfg.repetitions, a.repetitions);
    set(&mut cfg.warmup, a.warmup);
    set(&mut cfg.nominal_token_seconds, a.nominal_token_seconds);
    let report = bench_sweep(&cfg)?;
    match a.csv {
        Some(p) => fs::write(&p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?,
        None => emit(&report.to_csv())?,
    }
    if let Some(p) = a.json {
        write_json(&p, &serde_json::json!({ "config": cfg, "report": report }))?;
    }
    if let Some(p) = a.first_chunk {
        let (_, mut eval) = load_corpus(&cfg.eval_set)?;
        if cfg.eval_limit > 0 {
            eval.truncate(cfg.eval_limit);
        }
        let sources: Vec<Vec<u32>> = eval.into_iter().map(|s| s.source).collect();
        let mut rows = Vec::new();
        for c in &cfg.checkpoints {
            let t = load_checkpoint(&c.path)?;
            for &k in &cfg.steps {
                let r = first_chunk_breakdown(&t, k, &sources, &cfg.settings, cfg.repetitions, cfg.warmup)?;
                rows.push(serde_json::json!({ "checkpoint": c.name, "report": r }));
            }
        }
        write_json(&p, &rows)?;
    }
    Ok(())
}

// maskstats

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskstatsJob {
    pub masking: MaskingConfig,
    pub len: usize,
    pub block: usize,
    pub samples: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for MaskstatsJob {
    fn default() -> Self {
        Self {
            masking: MaskingConfig::hierarchical(),
            len: 256,
            block: 16,
            samples: 10_000,
            delta: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct MaskstatsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// global | hierarchical
    #[arg(long)]
    mode: Option<MaskingMode>,
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Deviation threshold of the global-mode concentration check.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-block ratio histogram as CSV here.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

fn maskstats(a: MaskstatsArgs) -> anyhow::Result<()> {
    let mut job: MaskstatsJob = read_config(a.config.as_deref())?;
    set(&mut job.masking.mode, a.mode);
    set(&mut job.len, a.len);
    set(&mut job.block, a.block);
    set(&mut job.samples, a.samples);
    set(&mut job.delta, a.delta);
    set(&mut job.seed, a.seed);
    let part = partition(job.len, job.block)?;
    let mut rng = RngState::new(job.seed);
    let stats = mask_stats(&part, &job.masking, &mut rng, job.samples, job.delta)?;
    if let Some(p) = a.histogram {
        fs::write(&p, stats.histogram_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(&(serde_json::to_string_pretty(&stats)? + "\n"))?;
    Ok(())
}

// gradcheck

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 32)]
    len: usize,
    #[arg(long, default_value_t = 8)]
    block_size: usize,
    #[arg(long, default_value_t = 2)]
    anchors: usize,
    #[arg(long, default_value_t = 12)]
    data_vocab: usize,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 8)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Fail when the maximum relative error exceeds this.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

pub fn gradcheck_config(a: &GradcheckArgs) -> TalkerConfig {
    TalkerConfig {
        vocab: Vocabulary::with_data_tokens(a.data_vocab),
        source_vocab: 10,
        d_model: a.d_model,
        heads: a.heads,
        layers: a.layers,
        d_ff: 2 * a.d_model,
        fusion_ff: 2 * a.d_model,
        block_size: a.block_size,
        anchors: a.anchors,
        max_len: a.len,
    }
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = gradcheck_config(&a);
    cfg.validate()?;
    let gc = GradCheckConfig {
        epsilon: a.epsilon,
        coords_per_tensor: a.coords,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let report = check_gradients(cfg, a.len, a.seed, &gc)?;
    emit(&format!(
        "checked {} coordinates over {} parameters\nmax relative error: {:e}\n",
        report.checked,
        cfg.param_count(),
        report.max_rel_err
    ))?;
    if !(report.max_rel_err < a.tolerance) {
        bail!("max relative error {:e} exceeds tolerance {:e}", report.max_rel_err, a.tolerance);
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 2 on usage errors, 1 on
/// any other failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Distill(a) => distill(a),
        Command::Decode(a) => decode(a),
        Command::Bench(a) => bench(a),
        Command::Maskstats(a) => maskstats(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
