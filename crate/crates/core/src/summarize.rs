//! Strided pooling that produces the next coarser scale, its backward, and
//! the fine-to-coarse residual accumulation run at the start of every block.

use crate::error::{config_err, usage_err, Result};
use crate::tensor::TensorMap;

/// Summarization kernel. `Max` is the model's operator; `Mean` exists only
/// as an experimental switch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolKind {
    #[default]
    Max,
    Mean,
}

/// Saved routing of a pooling forward.
#[derive(Clone, Debug)]
pub struct PoolContext {
    kind: PoolKind,
    in_shape: [usize; 4],
    stride: usize,
    /// For max pooling: winning position inside the `s x s` patch (row-major)
    /// for each output element.
    argmax: Vec<u32>,
}

impl PoolContext {
    pub fn input_shape(&self) -> [usize; 4] {
        self.in_shape
    }

    /// Patch-local winner for every output element (empty for mean pooling).
    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }
}

pub fn summarize(x: &TensorMap, stride: usize) -> Result<(TensorMap, PoolContext)> {
    summarize_with(x, stride, PoolKind::Max)
}

pub fn summarize_with(x: &TensorMap, stride: usize, kind: PoolKind) -> Result<(TensorMap, PoolContext)> {
    let [b, h, w, c] = x.shape();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(config_err!("grid {h}x{w} is not divisible by pooling stride {stride}"));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut out = TensorMap::zeros([b, oh, ow, c]);
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax.reserve(b * oh * ow * c);
    }
    let src = x.as_slice();
    let inv_area = 1.0 / (stride * stride) as f64;
    let mut best = vec![0.0; c];
    let mut best_at = vec![0u32; c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..stride {
                    for dx in 0..stride {
                        let o = x.offset(bi, oy * stride + dy, ox * stride + dx);
                        let pos = (dy * stride + dx) as u32;
                        let token = &src[o..o + c];
                        match kind {
                            PoolKind::Max => {
                                for ch in 0..c {
                                    if pos == 0 || token[ch] > best[ch] {
                                        best[ch] = token[ch];
                                        best_at[ch] = pos;
                                    }
                                }
                            }
                            PoolKind::Mean => {
                                for ch in 0..c {
                                    if pos == 0 {
                                        best[ch] = token[ch];
                                    } else {
                                        best[ch] += token[ch];
                                    }
                                }
                            }
                        }
                    }
                }
                let dst = out.token_mut(bi, oy, ox);
                match kind {
                    PoolKind::Max => {
                        dst.copy_from_slice(&best);
                        argmax.extend_from_slice(&best_at);
                    }
                    PoolKind::Mean => {
                        for ch in 0..c {
                            dst[ch] = best[ch] * inv_area;
                        }
                    }
                }
            }
        }
    }
    Ok((out, PoolContext { kind, in_shape: x.shape(), stride, argmax }))
}

/// Route the upstream gradient back through a pooling forward.
pub fn summarize_bwd(upstream: &TensorMap, ctx: &PoolContext) -> Result<TensorMap> {
    let [b, h, w, c] = ctx.in_shape;
    let s = ctx.stride;
    if upstream.shape() != [b, h / s, w / s, c] {
        return Err(usage_err!(
            "summarize_bwd: upstream {:?} does not match pooled shape {:?}",
            upstream.shape(),
            [b, h / s, w / s, c]
        ));
    }
    let mut dx = TensorMap::zeros(ctx.in_shape);
    let inv_area = 1.0 / (s * s) as f64;
    let mut k = 0;
    for bi in 0..b {
        for oy in 0..h / s {
            for ox in 0..w / s {
                let g = upstream.token(bi, oy, ox).to_vec();
                match ctx.kind {
                    PoolKind::Max => {
                        for (ch, gv) in g.iter().enumerate() {
                            let pos = ctx.argmax[k + ch] as usize;
                            let (dy, ddx) = (pos / s, pos % s);
                            dx.token_mut(bi, oy * s + dy, ox * s + ddx)[ch] += gv;
                        }
                        k += c;
                    }
                    PoolKind::Mean => {
                        for dy in 0..s {
                            for ddx in 0..s {
                                let t = dx.token_mut(bi, oy * s + dy, ox * s + ddx);
                                for ch in 0..c {
                                    t[ch] += g[ch] * inv_area;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// `X[l] += summarize(X[l - 1])` for `l = 1..` in fine-to-coarse order; each
/// step pools the already-updated finer scale. `scales[0]` is the finest
/// active scale. Returns one context per updated scale.
pub fn accumulate_summaries(scales: &mut [TensorMap], stride: usize, kind: PoolKind) -> Result<Vec<PoolContext>> {
    let mut ctxs = Vec::with_capacity(scales.len().saturating_sub(1));
    for l in 1..scales.len() {
        let (pooled, ctx) = summarize_with(&scales[l - 1], stride, kind)?;
        if pooled.shape() != scales[l].shape() {
            return Err(usage_err!(
                "scale {l} has shape {:?} but pooling scale {} gives {:?}",
                scales[l].shape(),
                l - 1,
                pooled.shape()
            ));
        }
        scales[l].add_assign(&pooled);
        ctxs.push(ctx);
    }
    Ok(ctxs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid4() -> TensorMap {
        TensorMap::from_fn([1, 4, 4, 1], |_, y, x, _| (y * 4 + x + 1) as f64)
    }

    #[test]
    fn max_pool_example() {
        let (y, _) = summarize(&grid4(), 2).unwrap();
        assert_eq!(y.shape(), [1, 2, 2, 1]);
        assert_eq!(y.as_slice(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn constant_and_identity_cases() {
        let c = TensorMap::from_fn([2, 4, 4, 3], |_, _, _, _| 1.25);
        let (y, _) = summarize(&c, 2).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 1.25));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = TensorMap::random_normal([1, 3, 3, 2], 1.0, &mut rng);
        assert_eq!(summarize(&x, 1).unwrap().0, x);
        assert!(summarize(&x, 2).unwrap_err().is_config());
    }

    #[test]
    fn backward_routes_to_winner_and_breaks_ties_row_major() {
        let (_, ctx) = summarize(&grid4(), 2).unwrap();
        let up = TensorMap::from_fn([1, 2, 2, 1], |_, _, _, _| 1.0);
        let dx = summarize_bwd(&up, &ctx).unwrap();
        let nz: Vec<usize> = dx.as_slice().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nz, vec![5, 7, 13, 15]);

        let tied = TensorMap::from_fn([1, 2, 2, 1], |_, _, _, _| 3.0);
        let (_, ctx) = summarize(&tied, 2).unwrap();
        let dx = summarize_bwd(&TensorMap::from_fn([1, 1, 1, 1], |_, _, _, _| 2.0), &ctx).unwrap();
        assert_eq!(dx.as_slice(), &[2.0, 0.0, 0.0, 0.0]);

        assert!(summarize_bwd(&TensorMap::zeros([1, 2, 1, 1]), &ctx).is_err());
    }

    #[test]
    fn mean_pool_and_its_backward() {
        let (y, ctx) = summarize_with(&grid4(), 2, PoolKind::Mean).unwrap();
        assert_eq!(y.as_slice(), &[3.5, 5.5, 11.5, 13.5]);
        let dx = summarize_bwd(&TensorMap::from_fn([1, 2, 2, 1], |_, _, _, _| 1.0), &ctx).unwrap();
        assert!(dx.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn accumulate_summaries_cascade() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = TensorMap::random_normal([1, 8, 8, 2], 1.0, &mut rng);
        let mut scales = vec![x0.clone(), TensorMap::zeros([1, 4, 4, 2]), TensorMap::zeros([1, 2, 2, 2])];
        accumulate_summaries(&mut scales, 2, PoolKind::Max).unwrap();
        let p1 = summarize(&x0, 2).unwrap().0;
        assert_eq!(scales[1], p1);
        assert_eq!(scales[2], summarize(&p1, 2).unwrap().0);

        // Non-zero coarse scale: plain residual add of the pooled finer scale.
        let c1 = TensorMap::random_normal([1, 4, 4, 2], 1.0, &mut rng);
        let mut two = vec![x0.clone(), c1.clone()];
        accumulate_summaries(&mut two, 2, PoolKind::Max).unwrap();
        for i in 0..c1.as_slice().len() {
            assert_eq!(two[1].as_slice()[i], c1.as_slice()[i] + p1.as_slice()[i]);
        }

        let mut single = vec![x0.clone()];
        assert!(accumulate_summaries(&mut single, 2, PoolKind::Max).unwrap().is_empty());
        assert_eq!(single[0], x0);
    }

    #[test]
    fn shape_law_reaches_coarsest_grid() {
        let layout = crate::layout::LayoutSpec::build(64, 4, 2).unwrap();
        let mut x = TensorMap::zeros([1, 64, 64, 1]);
        for _ in 1..layout.levels() {
            x = summarize(&x, 2).unwrap().0;
        }
        assert_eq!(x.height(), layout.grid_side(layout.levels() - 1));
    }

    proptest! {
        #[test]
        fn commutes_with_monotone_maps(vals in prop::collection::hash_set(-1000i32..1000, 16)) {
            let vals: Vec<f64> = vals.into_iter().map(|v| v as f64 / 10.0).collect();
            let x = TensorMap::new([1, 4, 4, 1], vals.clone()).unwrap();
            let f = |v: f64| v.exp() + 3.0 * v;
            let fx = TensorMap::new([1, 4, 4, 1], vals.iter().map(|&v| f(v)).collect()).unwrap();
            let lhs = summarize(&fx, 2).unwrap().0;
            let rhs: Vec<f64> = summarize(&x, 2).unwrap().0.as_slice().iter().map(|&v| f(v)).collect();
            prop_assert_eq!(lhs.as_slice(), &rhs[..]);
        }

        #[test]
        fn gradient_has_one_nonzero_per_output(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = TensorMap::random_normal([2, 4, 4, 3], 1.0, &mut rng);
            let (y, ctx) = summarize(&x, 2).unwrap();
            let up = TensorMap::random_normal(y.shape(), 1.0, &mut rng);
            let dx = summarize_bwd(&up, &ctx).unwrap();
            for b in 0..2 { for oy in 0..2 { for ox in 0..2 { for c in 0..3 {
                let nz = (0..4).filter(|p| dx.token(b, oy * 2 + p / 2, ox * 2 + p % 2)[c] != 0.0).count();
                prop_assert!(nz <= 1);
            }}}}
        }
    }
}
