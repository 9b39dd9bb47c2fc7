//! Deliberately naive reference implementations.
//!
//! Nothing here uses [`LayoutSpec`], the QKV cache or the batched window
//! code: geometry is recomputed from token coordinates, every projection is
//! recomputed per use and every token is processed by its own loop. The
//! arithmetic of each scalar reduction follows the same order as the
//! optimized path, so results are compared for exact equality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{window_self_attention, MhaParams};
use crate::block::{msa_block_forward, CommunicationMode, MsaBlockParams, MultiScaleState};
use crate::cache::QkvCache;
use crate::counter::OpCounter;
use crate::error::{usage_err, Result};
use crate::layout::LayoutSpec;
use crate::model::{AtlasConfig, AtlasParams};
use crate::params::ParamSet;
use crate::summarize::PoolKind;
use crate::tensor::{gelu_scalar, layer_norm_rows, matmul, softmax_rows, LinearWeights, Matrix, NormParams, TensorMap, LN_EPS};

fn ln_token(x: &[f64], norm: &NormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mut sum = 0.0;
    for v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut sq = 0.0;
    for v in x {
        sq += (v - mean) * (v - mean);
    }
    let inv = 1.0 / (sq / n + LN_EPS).sqrt();
    (0..x.len()).map(|c| (x[c] - mean) * inv * norm.gain[c] + norm.bias[c]).collect()
}

fn affine(w: &LinearWeights, x: &[f64]) -> Vec<f64> {
    (0..w.out_dim())
        .map(|j| {
            let row = w.weight.row(j);
            let mut acc = 0.0;
            for i in 0..x.len() {
                acc += x[i] * row[i];
            }
            acc + w.bias[j]
        })
        .collect()
}

/// One query token attending to a list of key tokens, each key token
/// projected with its own parameter set.
fn attend_token(query_params: &MhaParams, query: &[f64], keys: &[(Vec<f64>, &MhaParams)]) -> Vec<f64> {
    let c = query.len();
    let heads = query_params.heads;
    let dk = c / heads;
    let q = affine(&query_params.q, query);
    let ks: Vec<Vec<f64>> = keys.iter().map(|(x, p)| affine(&p.k, x)).collect();
    let vs: Vec<Vec<f64>> = keys.iter().map(|(x, p)| affine(&p.v, x)).collect();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut concat = vec![0.0; c];
    for h in 0..heads {
        let lo = h * dk;
        let mut w: Vec<f64> = ks
            .iter()
            .map(|k| {
                let mut acc = 0.0;
                for d in lo..lo + dk {
                    acc += q[d] * k[d];
                }
                acc * scale
            })
            .collect();
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, |m, v| if v > m { v } else { m });
        let mut total = 0.0;
        for v in w.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in w.iter_mut() {
            *v /= total;
        }
        for (j, v) in vs.iter().enumerate() {
            for d in lo..lo + dk {
                concat[d] += w[j] * v[d];
            }
        }
    }
    affine(&query_params.o, &concat)
}

/// Grid side of every scale: divide by `stride` until no larger than `window`.
fn scale_sides(grid: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut sides = vec![grid];
    while *sides.last().unwrap() > window {
        let next = sides.last().unwrap() / stride;
        sides.push(next);
    }
    sides
}

/// Tokens `(y, x)` of the window containing `(y, x)`, row-major.
fn window_members(side: usize, window: usize, y: usize, x: usize) -> Vec<(usize, usize)> {
    let ws = window.min(side);
    let (y0, x0) = (y / ws * ws, x / ws * ws);
    let mut out = Vec::with_capacity(ws * ws);
    for yy in y0..y0 + ws {
        for xx in x0..x0 + ws {
            out.push((yy, xx));
        }
    }
    out
}

fn pool_naive(x: &TensorMap, s: usize, kind: PoolKind) -> TensorMap {
    let [b, h, w, c] = x.shape();
    TensorMap::from_fn([b, h / s, w / s, c], |bi, oy, ox, ch| {
        let mut best = x.token(bi, oy * s, ox * s)[ch];
        let mut sum = best;
        for p in 1..s * s {
            let v = x.token(bi, oy * s + p / s, ox * s + p % s)[ch];
            if v > best {
                best = v;
            }
            sum += v;
        }
        match kind {
            PoolKind::Max => best,
            PoolKind::Mean => sum * (1.0 / (s * s) as f64),
        }
    })
}

/// Direct transliteration of one block over `state`: summarize, top-down
/// from coarse to fine, bottom-up from fine to coarse. Returns every scale
/// after the block.
pub fn naive_msa_forward(
    params: &MsaBlockParams,
    state: &MultiScaleState,
    mode: CommunicationMode,
    window: usize,
    stride: usize,
) -> Result<Vec<TensorMap>> {
    let mut maps: Vec<TensorMap> = state.maps().to_vec();
    let sides = scale_sides(maps[0].height(), window, stride);
    if sides.len() != maps.len() {
        return Err(usage_err!("naive oracle: {} scales in state, geometry gives {}", maps.len(), sides.len()));
    }
    let first = state.first();
    let top = if mode.multi_scale { maps.len() - 1 } else { first };
    let batch = maps[0].batch();
    let p = |l: usize| &params.scales[l - params.first];

    if mode.summarize {
        for l in first + 1..=top {
            let pooled = pool_naive(&maps[l - 1], stride, mode.pool);
            maps[l] = TensorMap::from_fn(maps[l].shape(), |b, y, x, c| maps[l].token(b, y, x)[c] + pooled.token(b, y, x)[c]);
        }
    }

    for l in (first..=top).rev() {
        let pre = maps[l].clone();
        let side = sides[l];
        let sp = p(l);
        let mut after_attn = pre.clone();
        for b in 0..batch {
            for y in 0..side {
                for x in 0..side {
                    let query = ln_token(pre.token(b, y, x), &sp.td_norm);
                    let mut keys = Vec::new();
                    for (ky, kx) in window_members(side, window, y, x) {
                        keys.push((ln_token(pre.token(b, ky, kx), &sp.td_norm), &sp.td));
                    }
                    if mode.top_down {
                        let mut f = 1;
                        for m in l + 1..=top {
                            f *= stride;
                            for (ky, kx) in window_members(sides[m], window, y / f, x / f) {
                                keys.push((ln_token(maps[m].token(b, ky, kx), &p(m).td_norm), &p(m).td));
                            }
                        }
                    }
                    let out = attend_token(&sp.td, &query, &keys);
                    for (t, o) in after_attn.token_mut(b, y, x).iter_mut().zip(out) {
                        *t += o;
                    }
                }
            }
        }
        let mut after_ffn = after_attn.clone();
        for b in 0..batch {
            for y in 0..side {
                for x in 0..side {
                    let z = after_attn.token(b, y, x);
                    let h: Vec<f64> = affine(&sp.ffn_in, &ln_token(z, &sp.ffn_norm)).into_iter().map(gelu_scalar).collect();
                    let o = affine(&sp.ffn_out, &h);
                    for (t, v) in after_ffn.token_mut(b, y, x).iter_mut().zip(o) {
                        *t += v;
                    }
                }
            }
        }
        maps[l] = after_ffn;
    }

    if mode.bottom_up {
        for l in first + 1..=top {
            let bu = p(l).bu.as_ref().ok_or_else(|| usage_err!("scale {l} lacks bottom-up parameters"))?;
            let pre = maps[l].clone();
            let mut next = pre.clone();
            for b in 0..batch {
                for y in 0..sides[l] {
                    for x in 0..sides[l] {
                        let query = ln_token(pre.token(b, y, x), &bu.norm_q);
                        let keys: Vec<(Vec<f64>, &MhaParams)> =
                            window_members(sides[l - 1], window, y * stride, x * stride)
                                .into_iter()
                                .map(|(ky, kx)| (ln_token(maps[l - 1].token(b, ky, kx), &bu.norm_kv), &bu.mha))
                                .collect();
                        let out = attend_token(&bu.mha, &query, &keys);
                        for (t, o) in next.token_mut(b, y, x).iter_mut().zip(out) {
                            *t += o;
                        }
                    }
                }
            }
            maps[l] = next;
        }
    }
    Ok(maps)
}

fn linear_matrix(x: &Matrix, w: &LinearWeights) -> Result<Matrix> {
    let mut y = matmul(x, &w.weight.transpose())?;
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(&w.bias) {
            *v += b;
        }
    }
    Ok(y)
}

/// Textbook global multi-head self-attention of all rows of `x`, written
/// with whole-matrix products.
pub fn full_self_attention(params: &MhaParams, x: &Matrix) -> Result<Matrix> {
    let q = linear_matrix(x, &params.q)?;
    let k = linear_matrix(x, &params.k)?;
    let v = linear_matrix(x, &params.v)?;
    let dk = params.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let n = x.rows();
    let mut concat = Matrix::zeros(n, x.cols());
    for h in 0..params.heads {
        let cols = |m: &Matrix| {
            Matrix::from_vec(n, dk, (0..n).flat_map(|r| m.row(r)[h * dk..(h + 1) * dk].to_vec()).collect())
        };
        let (qh, kh, vh) = (cols(&q)?, cols(&k)?, cols(&v)?);
        let mut s = matmul(&qh, &kh.transpose())?;
        for v in s.as_mut_slice() {
            *v *= scale;
        }
        let oh = matmul(&softmax_rows(&s), &vh)?;
        for r in 0..n {
            concat.row_mut(r)[h * dk..(h + 1) * dk].copy_from_slice(oh.row(r));
        }
    }
    linear_matrix(&concat, &params.o)
}

/// Plain ViT classifier built from the parameters of a single-scale,
/// single-window Atlas model: global attention blocks, mean pooling, head.
pub fn naive_vit_forward(params: &AtlasParams, config: &AtlasConfig, images: &TensorMap) -> Result<Matrix> {
    let grid = config.image_side / config.patch;
    if config.window < grid {
        return Err(usage_err!("naive ViT needs one window covering the {grid}x{grid} grid"));
    }
    let (b, p, cin) = (images.batch(), config.patch, config.in_channels);
    let n = grid * grid;
    let mut logits = Matrix::zeros(b, config.classes);
    for bi in 0..b {
        let mut patches = Matrix::zeros(n, p * p * cin);
        for t in 0..n {
            let (gy, gx) = (t / grid, t % grid);
            let mut col = 0;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..cin {
                        patches.set(t, col, images.token(bi, gy * p + py, gx * p + px)[c]);
                        col += 1;
                    }
                }
            }
        }
        let mut x = linear_matrix(&patches, &params.patch_embed)?;
        x.add_assign(&params.pos);
        for block in &params.blocks {
            let sp = &block.scales[0];
            let attn = full_self_attention(&sp.td, &layer_norm_rows(&x, &sp.td_norm).0)?;
            x.add_assign(&attn);
            let h = linear_matrix(&layer_norm_rows(&x, &sp.ffn_norm).0, &sp.ffn_in)?;
            let g = Matrix::from_vec(h.rows(), h.cols(), h.as_slice().iter().map(|&v| gelu_scalar(v)).collect())?;
            x.add_assign(&linear_matrix(&g, &sp.ffn_out)?);
        }
        let mut pooled = vec![0.0; config.channels];
        for t in 0..n {
            for (a, v) in pooled.iter_mut().zip(x.row(t)) {
                *a += v;
            }
        }
        let pooled = Matrix::from_vec(1, config.channels, pooled.iter().map(|s| s / n as f64).collect())?;
        let out = linear_matrix(&layer_norm_rows(&pooled, &params.final_norm).0, &params.head)?;
        logits.row_mut(bi).copy_from_slice(out.row(0));
    }
    Ok(logits)
}

/// Add independent `N(0, std^2)` noise to every learnable value, so biases
/// and norm parameters are not at their trivial initial values.
pub fn jitter<P: ParamSet, R: Rng + ?Sized>(params: &mut P, std: f64, rng: &mut R) {
    let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
    params.visit_mut("", &mut |_, _, vals| {
        for v in vals {
            *v += rng.sample(normal);
        }
    });
}

/// One member of the micro-configuration family used by the equivalence,
/// cache and graph suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockFixture {
    pub grid: usize,
    pub window: usize,
    pub stride: usize,
    pub channels: usize,
    pub heads: usize,
    pub batch: usize,
    pub first: usize,
    pub seed: u64,
}

impl BlockFixture {
    pub fn name(&self) -> String {
        format!(
            "grid{}_k{}_s{}_c{}_h{}_b{}_first{}_seed{}",
            self.grid, self.window, self.stride, self.channels, self.heads, self.batch, self.first, self.seed
        )
    }

    pub fn layout(&self) -> Result<LayoutSpec> {
        LayoutSpec::build(self.grid, self.window, self.stride)
    }

    /// Layout, jittered random block parameters and a random input state.
    pub fn build(&self) -> Result<(LayoutSpec, MsaBlockParams, MultiScaleState)> {
        let layout = self.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut params = MsaBlockParams::new(&layout, self.first, self.channels, self.heads, &mut rng)?;
        jitter(&mut params, 0.1, &mut rng);
        let maps = (0..layout.levels())
            .map(|l| {
                let side = layout.grid_side(l);
                TensorMap::random_normal([self.batch, side, side, self.channels], 1.0, &mut rng)
            })
            .collect();
        let state = MultiScaleState::new(&layout, maps, self.first)?;
        Ok((layout, params, state))
    }
}

/// Grid sides {8, 16, 32} x k {4, 8} x C {4, 8} x h {1, 2} with s = 2; every
/// layout with at least two scales is repeated with the block starting at
/// scale 1.
pub fn fixture_family() -> Vec<BlockFixture> {
    let mut out = Vec::new();
    let mut seed = 1000;
    for grid in [8, 16, 32] {
        for window in [4, 8] {
            for channels in [4, 8] {
                for heads in [1, 2] {
                    let levels = scale_sides(grid, window, 2).len();
                    let firsts: &[usize] = if levels > 1 { &[0, 1] } else { &[0] };
                    for &first in firsts {
                        seed += 1;
                        let batch = if seed % 2 == 0 { 2 } else { 1 };
                        out.push(BlockFixture { grid, window, stride: 2, channels, heads, batch, first, seed });
                    }
                }
            }
        }
    }
    out
}

/// Outcome of one fixture/mode pair of the equivalence suite.
#[derive(Clone, Debug)]
pub struct EquivalenceCase {
    pub fixture: String,
    pub mode: CommunicationMode,
    pub levels: usize,
    /// Optimized (no cache) equals the naive oracle bitwise.
    pub oracle_equal: bool,
    /// Cached forward equals the uncached one bitwise.
    pub cache_equal: bool,
    pub projections_uncached: u64,
    pub projections_cached: u64,
    /// First scale whose output differs from the oracle, if any.
    pub first_mismatch: Option<usize>,
}

impl EquivalenceCase {
    pub fn passed(&self) -> bool {
        self.oracle_equal && self.cache_equal
    }
}

/// Compare the optimized block (with and without the cache) against the
/// naive oracle on `fixture` in `mode`. With `fault`, one weight of the
/// optimized path is nudged first, which must make the comparison fail.
pub fn check_equivalence(fixture: &BlockFixture, mode: CommunicationMode, fault: bool) -> Result<EquivalenceCase> {
    let (layout, params, state) = fixture.build()?;
    let expected = naive_msa_forward(&params, &state, mode, fixture.window, fixture.stride)?;

    let mut fast_params = params.clone();
    if fault {
        let w = &mut fast_params.scales[0].td.v.weight;
        let v = w.get(0, 0);
        w.set(0, 0, v + 1e-9);
    }
    let mut plain = state.clone();
    let mut c_plain = OpCounter::new();
    msa_block_forward(&fast_params, &layout, &mut plain, mode, None, &mut c_plain)?;
    let mut cached = state;
    let mut c_cached = OpCounter::new();
    let mut cache = QkvCache::new(layout.levels());
    msa_block_forward(&fast_params, &layout, &mut cached, mode, Some(&mut cache), &mut c_cached)?;

    let first_mismatch = (0..expected.len()).find(|&l| plain.scale(l) != &expected[l]);
    Ok(EquivalenceCase {
        fixture: fixture.name(),
        mode,
        levels: layout.levels(),
        oracle_equal: first_mismatch.is_none(),
        cache_equal: plain == cached,
        projections_uncached: c_plain.projection_calls(),
        projections_cached: c_cached.projection_calls(),
        first_mismatch,
    })
}

/// Directional sensitivity of output token `sink` to input token `source`:
/// the largest channel of `(f(x + h d) - f(x - h d)) / 2h` at `sink`, where
/// `d` is `direction` placed at `source` and `h = 1e-4`.
pub fn receptive_field_probe<F>(
    f: F,
    input: &TensorMap,
    source: (usize, usize, usize),
    sink: (usize, usize, usize),
    direction: &[f64],
) -> Result<f64>
where
    F: Fn(&TensorMap) -> Result<TensorMap>,
{
    if direction.len() != input.channels() {
        return Err(usage_err!("probe direction has {} channels, input {}", direction.len(), input.channels()));
    }
    let h = 1e-4;
    let shifted = |sign: f64| {
        let mut x = input.clone();
        for (v, d) in x.token_mut(source.0, source.1, source.2).iter_mut().zip(direction) {
            *v += sign * h * d;
        }
        f(&x)
    };
    let (plus, minus) = (shifted(1.0)?, shifted(-1.0)?);
    let (a, b) = (plus.token(sink.0, sink.1, sink.2), minus.token(sink.0, sink.1, sink.2));
    Ok(a.iter().zip(b).map(|(p, m)| ((p - m) / (2.0 * h)).abs()).fold(0.0, f64::max))
}

/// Sensitivity of every finest-scale output token to one finest-scale input
/// token through a single block. Coarser input scales start at zero.
pub fn block_sensitivity_map(
    params: &MsaBlockParams,
    layout: &LayoutSpec,
    mode: CommunicationMode,
    fine_input: &TensorMap,
    source: (usize, usize),
    direction: &[f64],
) -> Result<Vec<f64>> {
    let run = |x: &TensorMap| -> Result<TensorMap> {
        let mut maps = vec![x.clone()];
        for l in 1..layout.levels() {
            let side = layout.grid_side(l);
            maps.push(TensorMap::zeros([x.batch(), side, side, x.channels()]));
        }
        let mut state = MultiScaleState::new(layout, maps, 0)?;
        msa_block_forward(params, layout, &mut state, mode, None, &mut OpCounter::new())?;
        Ok(state.into_maps().swap_remove(0))
    };
    let h = 1e-4;
    let shifted = |sign: f64| {
        let mut x = fine_input.clone();
        for (v, d) in x.token_mut(0, source.0, source.1).iter_mut().zip(direction) {
            *v += sign * h * d;
        }
        run(&x)
    };
    let (plus, minus) = (shifted(1.0)?, shifted(-1.0)?);
    let side = fine_input.height();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let s = plus
                .token(0, y, x)
                .iter()
                .zip(minus.token(0, y, x))
                .map(|(p, m)| ((p - m) / (2.0 * h)).abs())
                .fold(0.0, f64::max);
            out.push(s);
        }
    }
    Ok(out)
}

/// Window self-attention through the optimized path, for comparisons with
/// [`full_self_attention`].
pub fn windowed_reference(params: &MhaParams, x: &TensorMap, layout: &LayoutSpec, scale: usize) -> Result<TensorMap> {
    window_self_attention(params, x, layout, scale)
}
