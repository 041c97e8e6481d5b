//! Block partitioning and the two masking samplers used for training:
//! Global Bernoulli masking and Hierarchical Block-wise masking, plus a
//! Monte Carlo statistics report for both.
//!
//! Positions are 0-based throughout: block `k` covers
//! `k*B .. min((k+1)*B, T)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::ndcompute::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    len: usize,
    block: usize,
}

/// Splits `0..len` into contiguous blocks of `block` positions; the last
/// block may be shorter.
pub fn partition(len: usize, block: usize) -> Result<BlockPartition> {
    if len == 0 {
        return param_err("T", "sequence length must be at least 1");
    }
    if block == 0 {
        return param_err("B", "block size must be at least 1");
    }
    Ok(BlockPartition { len, block })
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn num_blocks(&self) -> usize {
        self.len.div_ceil(self.block)
    }

    pub fn block_range(&self, k: usize) -> Range<usize> {
        let start = k * self.block;
        start..((k + 1) * self.block).min(self.len)
    }

    pub fn block_len(&self, k: usize) -> usize {
        self.block_range(k).len()
    }

    pub fn block_of(&self, t: usize) -> usize {
        t / self.block
    }

    pub fn blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.num_blocks()).map(|k| self.block_range(k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRange {
    pub min: f64,
    pub max: f64,
}

impl RatioRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn pinned(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min) || !(0.0..=1.0).contains(&self.max) || self.min > self.max {
            return param_err(name, format!("range [{}, {}] must satisfy 0 ≤ min ≤ max ≤ 1", self.min, self.max));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut RngState) -> f64 {
        rng.uniform(self.min, self.max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    GlobalBernoulli,
    Hierarchical,
}

impl std::str::FromStr for MaskingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global" | "global_bernoulli" => Ok(Self::GlobalBernoulli),
            "hierarchical" => Ok(Self::Hierarchical),
            other => Err(format!("unknown masking mode `{other}` (global|hierarchical)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub mode: MaskingMode,
    /// Sequence-level ratio γ_g for Global Bernoulli masking.
    pub global: RatioRange,
    /// Block-selection ratio γ_c.
    pub block: RatioRange,
    /// Intra-block ratio γ_t.
    pub token: RatioRange,
}

impl MaskingConfig {
    pub const fn global_bernoulli() -> Self {
        Self {
            mode: MaskingMode::GlobalBernoulli,
            global: RatioRange::new(0.3, 0.8),
            block: RatioRange::new(0.5, 1.0),
            token: RatioRange::new(0.3, 1.0),
        }
    }

    pub const fn hierarchical() -> Self {
        Self {
            mode: MaskingMode::Hierarchical,
            ..Self::global_bernoulli()
        }
    }

    pub fn with_mode(mut self, mode: MaskingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate("global ratio")?;
        self.block.validate("block ratio")?;
        self.token.validate("token ratio")
    }
}

/// Sorted, duplicate-free masked positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    positions: Vec<usize>,
}

impl MaskSet {
    pub fn from_positions(mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        positions.dedup();
        Self { positions }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.positions.binary_search(&t).is_ok()
    }

    /// Number of masked positions inside `range`.
    pub fn count_in(&self, range: Range<usize>) -> usize {
        let lo = self.positions.partition_point(|&p| p < range.start);
        let hi = self.positions.partition_point(|&p| p < range.end);
        hi - lo
    }
}

/// Global Bernoulli masking: draw γ_g, then mask each of `len` positions
/// independently with probability γ_g.
pub fn sample_global(len: usize, cfg: &MaskingConfig, rng: &mut RngState) -> MaskSet {
    sample_global_drawn(len, cfg, rng).1
}

fn sample_global_drawn(len: usize, cfg: &MaskingConfig, rng: &mut RngState) -> (f64, MaskSet) {
    let gamma = cfg.global.draw(rng);
    let positions = (0..len).filter(|_| rng.unit() < gamma).collect();
    (gamma, MaskSet { positions })
}

/// One hierarchical draw with its latent ratios, for statistics.
#[derive(Clone, Debug)]
pub struct HierarchicalDraw {
    pub gamma_c: f64,
    pub gamma_t: f64,
    pub selected: Vec<usize>,
    pub mask: MaskSet,
}

/// Hierarchical Block-wise masking: select `⌊γ_c·K_blk⌋` blocks without
/// replacement, draw one γ_t shared by all of them, and mask
/// `max(1, ⌊γ_t·|I_k|⌋)` positions without replacement inside each.
pub fn sample_hierarchical(part: &BlockPartition, cfg: &MaskingConfig, rng: &mut RngState) -> MaskSet {
    sample_hierarchical_drawn(part, cfg, rng).mask
}

pub fn sample_hierarchical_drawn(
    part: &BlockPartition,
    cfg: &MaskingConfig,
    rng: &mut RngState,
) -> HierarchicalDraw {
    let k_blk = part.num_blocks();
    let gamma_c = cfg.block.draw(rng);
    let m_blk = ((gamma_c * k_blk as f64).floor() as usize).min(k_blk);
    let selected = rng.choose_distinct(k_blk, m_blk);
    let gamma_t = cfg.token.draw(rng);
    let mut positions = Vec::new();
    for &k in &selected {
        let range = part.block_range(k);
        let size = range.len();
        let n_k = ((gamma_t * size as f64).floor() as usize).clamp(1, size);
        positions.extend(rng.choose_distinct(size, n_k).into_iter().map(|i| range.start + i));
    }
    HierarchicalDraw {
        gamma_c,
        gamma_t,
        selected,
        mask: MaskSet::from_positions(positions),
    }
}

/// Draws a mask for a sequence of valid length `part.len()` with the
/// configured mode.
pub fn sample_mask(part: &BlockPartition, cfg: &MaskingConfig, rng: &mut RngState) -> MaskSet {
    match cfg.mode {
        MaskingMode::GlobalBernoulli => sample_global(part.len(), cfg, rng),
        MaskingMode::Hierarchical => sample_hierarchical(part, cfg, rng),
    }
}

/// `E[max(lower, ⌊c·X⌋)]` for `X ~ U(a, b)`, computed exactly.
fn expected_floor(c: f64, range: RatioRange, lower: f64) -> f64 {
    let (lo, hi) = (c * range.min, c * range.max);
    if hi <= lo {
        return lo.floor().max(lower);
    }
    let mut acc = 0.0;
    let mut y = lo;
    while y < hi {
        let next = (y.floor() + 1.0).min(hi);
        acc += (next - y) * y.floor().max(lower);
        y = next;
    }
    acc / (hi - lo)
}

/// Exact expected masked fraction of the hierarchical sampler, floors and
/// ragged last block included.
pub fn hierarchical_expected_fraction(part: &BlockPartition, cfg: &MaskingConfig) -> f64 {
    let k_blk = part.num_blocks() as f64;
    let expected_blocks = expected_floor(k_blk, cfg.block, 0.0);
    let per_block: f64 = (0..part.num_blocks())
        .map(|k| expected_floor(part.block_len(k) as f64, cfg.token, 1.0))
        .sum();
    expected_blocks / k_blk * per_block / part.len() as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct HoeffdingCheck {
    pub delta: f64,
    pub tail_frequency: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskStats {
    pub mode: MaskingMode,
    pub samples: usize,
    pub len: usize,
    pub block: usize,
    pub num_blocks: usize,
    pub mean_fraction: f64,
    pub std_fraction: f64,
    /// `K_blk·E[γ_c]·B·E[γ_t]/T` for hierarchical, `E[γ_g]` for global.
    pub approx_fraction: f64,
    /// Floor-aware exact expectation (hierarchical) or `E[γ_g]` (global).
    pub exact_fraction: f64,
    /// Counts of `R_k·B` over full-size blocks (selected blocks only in
    /// hierarchical mode); index `i` means ratio `i / B`.
    pub ratio_histogram: Vec<u64>,
    pub quantization_checked: u64,
    pub quantization_violations: u64,
    pub hoeffding: Option<HoeffdingCheck>,
}

pub const MIN_STAT_SAMPLES: usize = 1000;

/// Monte Carlo report of the sampler configured in `cfg` over `samples`
/// draws. `delta` is the deviation threshold of the concentration check
/// (global mode only).
pub fn mask_stats(
    part: &BlockPartition,
    cfg: &MaskingConfig,
    rng: &mut RngState,
    samples: usize,
    delta: f64,
) -> Result<MaskStats> {
    cfg.validate()?;
    if samples < MIN_STAT_SAMPLES {
        return param_err("samples", format!("need at least {MIN_STAT_SAMPLES}, got {samples}"));
    }
    let b = part.block_size();
    let t = part.len();
    let full_blocks: Vec<usize> = (0..part.num_blocks()).filter(|&k| part.block_len(k) == b).collect();
    let mut hist = vec![0u64; b + 1];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut q_checked = 0u64;
    let mut q_viol = 0u64;
    let mut tail = 0u64;
    for _ in 0..samples {
        let frac = match cfg.mode {
            MaskingMode::Hierarchical => {
                let draw = sample_hierarchical_drawn(part, cfg, rng);
                for &k in &draw.selected {
                    if part.block_len(k) != b {
                        continue;
                    }
                    let n_k = draw.mask.count_in(part.block_range(k));
                    hist[n_k] += 1;
                    if draw.gamma_t >= 1.0 / b as f64 {
                        q_checked += 1;
                        let gap = draw.gamma_t - n_k as f64 / b as f64;
                        if !(gap >= 0.0 && gap < 1.0 / b as f64) {
                            q_viol += 1;
                        }
                    }
                }
                draw.mask.len() as f64 / t as f64
            }
            MaskingMode::GlobalBernoulli => {
                let (gamma, mask) = sample_global_drawn(t, cfg, rng);
                let mut worst: f64 = 0.0;
                for &k in &full_blocks {
                    let n_k = mask.count_in(part.block_range(k));
                    hist[n_k] += 1;
                    worst = worst.max((n_k as f64 / b as f64 - gamma).abs());
                }
                if worst >= delta {
                    tail += 1;
                }
                mask.len() as f64 / t as f64
            }
        };
        sum += frac;
        sum_sq += frac * frac;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let (approx, exact, hoeffding) = match cfg.mode {
        MaskingMode::Hierarchical => {
            let k = part.num_blocks() as f64;
            let approx = k * cfg.block.mean() * b as f64 * cfg.token.mean() / t as f64;
            (approx, hierarchical_expected_fraction(part, cfg), None)
        }
        MaskingMode::GlobalBernoulli => {
            let bound = 2.0 * full_blocks.len() as f64 * (-2.0 * b as f64 * delta * delta).exp();
            let freq = tail as f64 / n;
            (
                cfg.global.mean(),
                cfg.global.mean(),
                Some(HoeffdingCheck {
                    delta,
                    tail_frequency: freq,
                    bound,
                    holds: freq <= bound,
                }),
            )
        }
    };
    Ok(MaskStats {
        mode: cfg.mode,
        samples,
        len: t,
        block: b,
        num_blocks: part.num_blocks(),
        mean_fraction: mean,
        std_fraction: var.sqrt(),
        approx_fraction: approx,
        exact_fraction: exact,
        ratio_histogram: hist,
        quantization_checked: q_checked,
        quantization_violations: q_viol,
        hoeffding,
    })
}

impl MaskStats {
    /// Histogram as `ratio,count` CSV.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("ratio,count\n");
        for (i, c) in self.ratio_histogram.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i as f64 / self.block as f64, c));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pinned_hier(c: f64, t: f64) -> MaskingConfig {
        MaskingConfig {
            block: RatioRange::pinned(c),
            token: RatioRange::pinned(t),
            ..MaskingConfig::hierarchical()
        }
    }

    #[test]
    fn partition_even_blocks() {
        let p = partition(32, 16).unwrap();
        assert_eq!(p.num_blocks(), 2);
        assert_eq!(p.block_range(0), 0..16);
        assert_eq!(p.block_range(1), 16..32);
    }

    #[test]
    fn partition_ragged_last_block() {
        let p = partition(20, 16).unwrap();
        assert_eq!(p.num_blocks(), 2);
        assert_eq!(p.block_len(0), 16);
        assert_eq!(p.block_len(1), 4);
    }

    #[test]
    fn partition_single_block() {
        assert_eq!(partition(16, 16).unwrap().num_blocks(), 1);
    }

    #[test]
    fn partition_rejects_zero() {
        assert!(partition(0, 16).is_err());
        assert!(partition(16, 0).is_err());
    }

    #[test]
    fn global_all_or_nothing() {
        let mut rng = RngState::new(0);
        let all = MaskingConfig {
            global: RatioRange::pinned(1.0),
            ..MaskingConfig::global_bernoulli()
        };
        assert_eq!(sample_global(37, &all, &mut rng).len(), 37);
        let none = MaskingConfig {
            global: RatioRange::pinned(0.0),
            ..MaskingConfig::global_bernoulli()
        };
        assert!(sample_global(37, &none, &mut rng).is_empty());
    }

    #[test]
    fn global_empirical_fraction() {
        let mut rng = RngState::new(1);
        let cfg = MaskingConfig::global_bernoulli();
        let total: usize = (0..1000).map(|_| sample_global(10_000, &cfg, &mut rng).len()).sum();
        let frac = total as f64 / 1e7;
        assert!((frac - 0.55).abs() < 0.02, "{frac}");
    }

    #[test]
    fn hierarchical_pinned_half_half() {
        let part = partition(32, 16).unwrap();
        let mut rng = RngState::new(2);
        for _ in 0..50 {
            let m = sample_hierarchical(&part, &pinned_hier(0.5, 0.5), &mut rng);
            assert_eq!(m.len(), 8);
            let first = part.block_of(m.positions()[0]);
            assert!(m.positions().iter().all(|&p| part.block_of(p) == first));
        }
    }

    #[test]
    fn hierarchical_tiny_ratio_masks_one_per_block() {
        let part = partition(64, 16).unwrap();
        let mut rng = RngState::new(3);
        let m = sample_hierarchical(&part, &pinned_hier(1.0, 0.5 / 16.0), &mut rng);
        for k in 0..4 {
            assert_eq!(m.count_in(part.block_range(k)), 1);
        }
    }

    #[test]
    fn hierarchical_full_ratios_mask_everything() {
        let part = partition(40, 16).unwrap();
        let mut rng = RngState::new(4);
        assert_eq!(sample_hierarchical(&part, &pinned_hier(1.0, 1.0), &mut rng).len(), 40);
    }

    #[test]
    fn hierarchical_zero_blocks_gives_empty_mask() {
        let part = partition(32, 16).unwrap();
        let mut rng = RngState::new(5);
        assert!(sample_hierarchical(&part, &pinned_hier(0.4, 1.0), &mut rng).is_empty());
    }

    #[test]
    fn expected_floor_matches_hand_values() {
        // ⌊16·U(0.5, 1)⌋ is uniform on 8..=15.
        assert!((expected_floor(16.0, RatioRange::new(0.5, 1.0), 0.0) - 11.5).abs() < 1e-12);
        // ⌊16·U(0.3, 1)⌋: 4 on a 0.2-wide piece, then 5..=15.
        let e = expected_floor(16.0, RatioRange::new(0.3, 1.0), 1.0);
        assert!((e - (0.8 + 110.0) / 11.2).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_mc_agrees_with_exact_expectation() {
        let part = partition(256, 16).unwrap();
        let cfg = MaskingConfig::hierarchical();
        let stats = mask_stats(&part, &cfg, &mut RngState::new(6), 10_000, 0.2).unwrap();
        assert!((stats.mean_fraction - stats.exact_fraction).abs() < 0.01, "{stats:?}");
        assert!((stats.approx_fraction - 0.4875).abs() < 1e-12);
        assert_eq!(stats.quantization_violations, 0);
    }

    #[test]
    fn stats_needs_enough_samples() {
        let part = partition(32, 16).unwrap();
        assert!(mask_stats(&part, &MaskingConfig::hierarchical(), &mut RngState::new(0), 10, 0.2).is_err());
    }

    #[test]
    fn invalid_range_rejected() {
        let cfg = MaskingConfig {
            token: RatioRange::new(0.8, 0.2),
            ..MaskingConfig::hierarchical()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn hierarchical_invariants(
            len in 1usize..200,
            block in 1usize..24,
            seed in 0u64..1000,
            c_lo in 0.0f64..1.0, c_w in 0.0f64..1.0,
            t_lo in 0.0f64..1.0, t_w in 0.0f64..1.0,
        ) {
            let cfg = MaskingConfig {
                block: RatioRange::new(c_lo, (c_lo + c_w).min(1.0)),
                token: RatioRange::new(t_lo, (t_lo + t_w).min(1.0)),
                ..MaskingConfig::hierarchical()
            };
            let part = partition(len, block).unwrap();
            let draw = sample_hierarchical_drawn(&part, &cfg, &mut RngState::new(seed));
            let expected_blocks = (draw.gamma_c * part.num_blocks() as f64).floor() as usize;
            prop_assert_eq!(draw.selected.len(), expected_blocks);
            for &p in draw.mask.positions() {
                prop_assert!(p < len);
                prop_assert!(draw.selected.contains(&part.block_of(p)));
            }
            for &k in &draw.selected {
                let size = part.block_len(k);
                let n = draw.mask.count_in(part.block_range(k));
                prop_assert_eq!(n, ((draw.gamma_t * size as f64).floor() as usize).clamp(1, size));
                if size == block && draw.gamma_t >= 1.0 / block as f64 {
                    let gap = draw.gamma_t - n as f64 / block as f64;
                    prop_assert!(gap >= 0.0 && gap < 1.0 / block as f64);
                }
            }
            let again = sample_hierarchical(&part, &cfg, &mut RngState::new(seed));
            prop_assert_eq!(again, draw.mask);
        }

        #[test]
        fn global_stays_in_range(len in 1usize..300, seed in 0u64..1000) {
            let m = sample_global(len, &MaskingConfig::global_bernoulli(), &mut RngState::new(seed));
            prop_assert!(m.positions().iter().all(|&p| p < len));
            prop_assert!(m.positions().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
