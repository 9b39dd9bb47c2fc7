//! Attention cost accounting: closed-form pair counts, a counting-only walk
//! of the layout, and timed forwards for the scaling sweep.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{msa_block_forward, CommunicationMode, MsaBlockParams, MultiScaleState};
use crate::cache::QkvCache;
use crate::counter::OpCounter;
use crate::error::Result;
use crate::layout::LayoutSpec;
use crate::model::AtlasConfig;
use crate::tensor::TensorMap;

fn window_keys(layout: &LayoutSpec, scale: usize) -> u64 {
    layout.window_len(scale) as u64
}

/// Query-key pairs of one block whose first active scale is `first`, per
/// image: every scale-`l` token attends to `K_l` own-window keys plus `K_m`
/// keys of each coarser active scale `m`, and every coarse token of a
/// bottom-up group attends to the `K_{l-1}` tokens of its parent window.
///
/// `K_m = min(k, H_m)^2`, so a coarsest grid smaller than one window counts
/// its real size.
pub fn analytic_block_pairs(layout: &LayoutSpec, first: usize, mode: CommunicationMode) -> u64 {
    let top = mode.top_scale(layout, first);
    let mut pairs = 0;
    for l in first..=top {
        let n = layout.tokens(l) as u64;
        let keys: u64 = if mode.top_down { (l..=top).map(|m| window_keys(layout, m)).sum() } else { window_keys(layout, l) };
        pairs += n * keys;
        if mode.bottom_up && l > first {
            pairs += n * window_keys(layout, l - 1);
        }
    }
    pairs
}

/// The textbook form `sum_l N_l K (L - l + 1) + sum_{l >= 2} N_l K` with
/// 1-based scales and one `K` for all scales. Agrees with
/// [`analytic_block_pairs`] whenever the coarsest grid fills a window.
pub fn uniform_block_pairs(tokens_per_scale: &[u64], window_tokens: u64) -> u64 {
    let levels = tokens_per_scale.len() as u64;
    let td: u64 = tokens_per_scale.iter().enumerate().map(|(i, n)| n * window_tokens * (levels - i as u64)).sum();
    let bu: u64 = tokens_per_scale.iter().skip(1).map(|n| n * window_tokens).sum();
    td + bu
}

/// Counters an uncached forward of one block would produce, obtained by
/// walking windows and groups without touching any tensor.
pub fn traverse_block(layout: &LayoutSpec, first: usize, mode: CommunicationMode, channels: usize, batch: usize) -> OpCounter {
    let mut c = OpCounter::new();
    let ch = channels;
    let top = mode.top_scale(layout, first);
    for _ in 0..batch {
        for l in (first..=top).rev() {
            for w in 0..layout.num_windows(l) {
                let q = layout.window_tokens(l, w).len();
                c.record_projection(q, ch, ch);
                let mut keys = 0;
                let mut sources = vec![q];
                if mode.top_down {
                    sources.extend((l + 1..=top).map(|m| layout.window_tokens(m, layout.ancestor_window(l, w, m)).len()));
                }
                for &rows in &sources {
                    c.record_projection(rows, ch, ch);
                    c.record_projection(rows, ch, ch);
                    keys += rows;
                }
                c.record_attention(q, keys, ch);
                c.record_linear(q, ch, ch);
            }
            let n = layout.tokens(l);
            c.record_linear(n, ch, 4 * ch);
            c.record_linear(n, 4 * ch, ch);
        }
        if mode.bottom_up {
            for l in first + 1..=top {
                for g in 0..layout.num_groups(l) {
                    let q = layout.group_tokens(l, g).len();
                    let keys = layout.window_tokens(l - 1, layout.parent_window(l, g)).len();
                    c.record_projection(q, ch, ch);
                    c.record_projection(keys, ch, ch);
                    c.record_projection(keys, ch, ch);
                    c.record_attention(q, keys, ch);
                    c.record_linear(q, ch, ch);
                }
            }
        }
    }
    c
}

/// Attention pairs of a whole model forward per image, summed over its block
/// schedule.
pub fn analytic_model_pairs(config: &AtlasConfig) -> Result<u64> {
    let layout = config.validate()?;
    Ok(config.block_schedule().into_iter().map(|first| analytic_block_pairs(&layout, first, config.mode)).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub grid: usize,
    pub tokens: usize,
    pub levels: usize,
    pub analytic_pairs: u64,
    pub uniform_pairs: u64,
    pub measured_pairs: u64,
    /// `"forward"` for a timed block forward, `"count"` for the walk only.
    pub source: &'static str,
    pub wall_ms: Option<f64>,
    pub projections: u64,
    pub projections_uncached: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Multiply-accumulates avoided by the cache.
    pub macs_saved: u64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "grid,tokens,levels,analytic_pairs,uniform_pairs,measured_pairs,source,wall_ms,projections,projections_uncached,cache_hits,cache_misses,macs_saved";

    pub fn to_csv(&self) -> String {
        let wall = self.wall_ms.map(|t| format!("{t:.3}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.grid,
            self.tokens,
            self.levels,
            self.analytic_pairs,
            self.uniform_pairs,
            self.measured_pairs,
            self.source,
            wall,
            self.projections,
            self.projections_uncached,
            self.cache_hits,
            self.cache_misses,
            self.macs_saved
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub grids: Vec<usize>,
    pub window: usize,
    pub stride: usize,
    pub channels: usize,
    pub heads: usize,
    pub mode: CommunicationMode,
    /// Grids larger than this are only counted, not run.
    pub max_forward_grid: usize,
    /// Timed repetitions per forward; the fastest is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            grids: vec![64, 128, 256, 512],
            window: 16,
            stride: 4,
            channels: 8,
            heads: 1,
            mode: CommunicationMode::MSA,
            max_forward_grid: 256,
            repeats: 1,
            seed: 0,
        }
    }
}

/// One sweep row; a bad configuration fails only its own row.
pub fn bench_row(grid: usize, opts: &BenchOptions) -> Result<BenchRow> {
    let layout = LayoutSpec::build(grid, opts.window, opts.stride)?;
    let levels = layout.levels();
    let ch = opts.channels;
    let tokens: Vec<u64> = (0..levels).map(|l| layout.tokens(l) as u64).collect();
    let uncached = traverse_block(&layout, 0, opts.mode, ch, 1);
    let mut row = BenchRow {
        grid,
        tokens: layout.tokens(0),
        levels,
        analytic_pairs: analytic_block_pairs(&layout, 0, opts.mode),
        uniform_pairs: uniform_block_pairs(&tokens, (opts.window * opts.window) as u64),
        measured_pairs: uncached.attention_pairs(),
        source: "count",
        wall_ms: None,
        projections: uncached.projection_calls(),
        projections_uncached: uncached.projection_calls(),
        cache_hits: 0,
        cache_misses: 0,
        macs_saved: 0,
    };
    if grid > opts.max_forward_grid {
        return Ok(row);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let params = MsaBlockParams::new(&layout, 0, ch, opts.heads, &mut rng)?;
    let maps = (0..levels).map(|l| TensorMap::random_normal([1, layout.grid_side(l), layout.grid_side(l), ch], 1.0, &mut rng)).collect();
    let state = MultiScaleState::new(&layout, maps, 0)?;
    let mut best = f64::INFINITY;
    let mut counter = OpCounter::new();
    for _ in 0..opts.repeats.max(1) {
        let mut s = state.clone();
        let mut cache = QkvCache::new(levels);
        counter = OpCounter::new();
        let t = Instant::now();
        msa_block_forward(&params, &layout, &mut s, opts.mode, Some(&mut cache), &mut counter)?;
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    row.source = "forward";
    row.wall_ms = Some(best);
    row.measured_pairs = counter.attention_pairs();
    row.projections = counter.projection_calls();
    row.cache_hits = counter.cache_hits();
    row.cache_misses = counter.cache_misses();
    row.macs_saved = uncached.macs().saturating_sub(counter.macs());
    Ok(row)
}

pub fn bench_sweep(opts: &BenchOptions) -> Vec<(usize, Result<BenchRow>)> {
    opts.grids.iter().map(|&g| (g, bench_row(g, opts))).collect()
}

/// `t(4N) / t(N)` for consecutive timed rows whose grid side doubles.
pub fn scaling_ratios(rows: &[BenchRow]) -> Vec<(usize, usize, f64)> {
    let timed: Vec<&BenchRow> = rows.iter().filter(|r| r.wall_ms.is_some()).collect();
    timed
        .windows(2)
        .filter(|w| w[1].grid == 2 * w[0].grid)
        .map(|w| (w[0].grid, w[1].grid, w[1].wall_ms.unwrap() / w[0].wall_ms.unwrap()))
        .collect()
}

pub fn sweep_csv(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", BenchRow::CSV_HEADER);
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}
