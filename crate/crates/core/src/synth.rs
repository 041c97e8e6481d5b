//! Synthetic conditioning task: source sequences of semantic ids expand to
//! target token sequences through a fixed per-token fragment grammar.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::ndcompute::RngState;
use crate::talker::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub source_vocab: usize,
    /// Number of data tokens in the target vocabulary (specials excluded).
    pub data_vocab: usize,
    pub upsample: usize,
    pub grammar_seed: u64,
    /// Per-position substitution rate applied to targets.
    pub noise: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            source_vocab: 32,
            data_vocab: 64,
            upsample: 4,
            grammar_seed: 0,
            noise: 0.0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.upsample == 0 {
            return param_err("upsample", "must be at least 1");
        }
        if self.source_vocab == 0 || self.data_vocab < 2 {
            return param_err("data_vocab", "need a non-empty source vocabulary and at least two data tokens");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return param_err("noise", format!("rate {} outside [0, 0.5)", self.noise));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::with_data_tokens(self.data_vocab)
    }
}

/// Source token to target fragment table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    fragments: Vec<Vec<u32>>,
}

impl Grammar {
    pub fn fragment(&self, source: u32) -> &[u32] {
        &self.fragments[source as usize]
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    /// Noise-free expansion, EOS-terminated.
    pub fn expand(&self, source: &[u32], eos: u32) -> Vec<u32> {
        let mut out: Vec<u32> = source.iter().flat_map(|&s| self.fragment(s).iter().copied()).collect();
        out.push(eos);
        out
    }
}

/// Draws one fragment per source token. Fragments are pairwise distinct
/// whenever the fragment space allows it.
pub fn gen_grammar(spec: &TaskSpec) -> Result<Grammar> {
    spec.validate()?;
    let mut rng = RngState::derive(spec.grammar_seed, 0x6772_616d);
    let space = (spec.data_vocab as f64).powi(spec.upsample as i32);
    let distinct = space >= spec.source_vocab as f64;
    let mut seen = HashSet::new();
    let mut fragments = Vec::with_capacity(spec.source_vocab);
    while fragments.len() < spec.source_vocab {
        let frag: Vec<u32> = (0..spec.upsample).map(|_| rng.below(spec.data_vocab) as u32).collect();
        if distinct && !seen.insert(frag.clone()) {
            continue;
        }
        fragments.push(frag);
    }
    Ok(Grammar { fragments })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePair {
    pub source: Vec<u32>,
    /// `upsample * source.len()` data tokens followed by EOS.
    pub target: Vec<u32>,
}

impl SamplePair {
    /// Target extended with EOS up to the next multiple of `block`.
    pub fn padded_target(&self, block: usize, eos: u32) -> Vec<u32> {
        let len = self.target.len().div_ceil(block) * block;
        let mut t = self.target.clone();
        t.resize(len, eos);
        t
    }
}

/// `count` samples with source lengths drawn uniformly from `n_range`
/// (inclusive).
pub fn gen_dataset(
    spec: &TaskSpec,
    count: usize,
    n_range: (usize, usize),
    rng: &mut RngState,
) -> Result<Vec<SamplePair>> {
    if count == 0 {
        return param_err("count", "must be at least 1");
    }
    if n_range.0 == 0 || n_range.0 > n_range.1 {
        return param_err("n_range", format!("need 1 ≤ min ≤ max, got {n_range:?}"));
    }
    let grammar = gen_grammar(spec)?;
    let eos = spec.vocabulary().eos;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = n_range.0 + rng.below(n_range.1 - n_range.0 + 1);
        let source: Vec<u32> = (0..n).map(|_| rng.below(spec.source_vocab) as u32).collect();
        let mut target = grammar.expand(&source, eos);
        let data_len = target.len() - 1;
        for tok in &mut target[..data_len] {
            if spec.noise > 0.0 && rng.unit() < spec.noise {
                // Substitute with a different data token.
                let r = rng.below(spec.data_vocab - 1) as u32;
                *tok = if r >= *tok { r + 1 } else { r };
            }
        }
        out.push(SamplePair { source, target });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenErrorRate {
    pub edits: usize,
    pub ref_len: usize,
    pub rate: f64,
    /// Set when the reference is empty and the rate uses a denominator of 1.
    pub empty_ref: bool,
}

/// Token-level Levenshtein distance normalized by the reference length.
pub fn token_error_rate(hyp: &[u32], reference: &[u32]) -> TokenErrorRate {
    let edits = levenshtein(hyp, reference);
    let empty_ref = reference.is_empty();
    let rate = if empty_ref {
        hyp.len() as f64
    } else {
        edits as f64 / reference.len() as f64
    };
    TokenErrorRate {
        edits,
        ref_len: reference.len(),
        rate,
        empty_ref: empty_ref && !hyp.is_empty(),
    }
}

fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const CORPUS_TAG: &str = "# mdm-corpus v1";

/// Corpus text: a header line, then per record the source ids one per line,
/// a blank line, the target ids one per line and another blank line.
pub fn write_corpus<W: Write>(spec: &TaskSpec, samples: &[SamplePair], mut w: W) -> Result<()> {
    let mut s = format!(
        "{CORPUS_TAG} source_vocab={} data_vocab={} upsample={} grammar_seed={} noise={} count={}\n",
        spec.source_vocab,
        spec.data_vocab,
        spec.upsample,
        spec.grammar_seed,
        spec.noise,
        samples.len()
    );
    for sample in samples {
        for part in [&sample.source, &sample.target] {
            for v in part.iter() {
                writeln!(s, "{v}").expect("write to String");
            }
            s.push('\n');
        }
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn corpus_err<T>(line: usize, reason: impl std::fmt::Display) -> Result<T> {
    Err(Error::Format {
        what: "corpus",
        reason: format!("line {line}: {reason}"),
    })
}

fn header_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().or_else(|e| corpus_err(1, format!("field `{key}`: {e}")))
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<(TaskSpec, Vec<SamplePair>)> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => return corpus_err(1, "missing header"),
    };
    let Some(fields) = header.strip_prefix(CORPUS_TAG) else {
        return corpus_err(1, "header must start with `# mdm-corpus v1`");
    };
    let mut spec = TaskSpec::default();
    let mut count = None;
    for kv in fields.split_whitespace() {
        let Some((k, v)) = kv.split_once('=') else {
            return corpus_err(1, format!("bad header field `{kv}`"));
        };
        match k {
            "source_vocab" => spec.source_vocab = header_field(k, v)?,
            "data_vocab" => spec.data_vocab = header_field(k, v)?,
            "upsample" => spec.upsample = header_field(k, v)?,
            "grammar_seed" => spec.grammar_seed = header_field(k, v)?,
            "noise" => spec.noise = header_field(k, v)?,
            "count" => count = Some(header_field::<usize>(k, v)?),
            _ => return corpus_err(1, format!("unknown header field `{k}`")),
        }
    }
    spec.validate()?;

    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut cur = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            groups.push(std::mem::take(&mut cur));
        } else {
            match line.parse::<u32>() {
                Ok(v) => cur.push(v),
                Err(e) => return corpus_err(i + 2, e),
            }
        }
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    if groups.len() % 2 != 0 {
        return corpus_err(0, "record without a target block");
    }
    let samples: Vec<SamplePair> = groups
        .chunks_exact(2)
        .map(|c| SamplePair {
            source: c[0].clone(),
            target: c[1].clone(),
        })
        .collect();
    if let Some(n) = count {
        if n != samples.len() {
            return corpus_err(1, format!("header count {n} but {} records", samples.len()));
        }
    }
    Ok((spec, samples))
}

pub fn save_corpus(path: &Path, spec: &TaskSpec, samples: &[SamplePair]) -> Result<()> {
    write_corpus(spec, samples, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_corpus(path: &Path) -> Result<(TaskSpec, Vec<SamplePair>)> {
    read_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}
