//! Central finite differences against the hand-written backward passes.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bottom_up_attention, bottom_up_attention_backward, mha_backward, mha_forward, top_down_attention,
    top_down_attention_backward, window_self_attention_backward, window_self_attention_forward, MhaParams, ScaleSource,
};
use crate::block::{msa_block_backward, msa_block_forward_train, CommunicationMode, MsaBlockParams, MultiScaleState};
use crate::counter::OpCounter;
use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::model::{cross_entropy, AtlasConfig, AtlasModel};
use crate::oracle::jitter;
use crate::params::ParamSet;
use crate::summarize::{summarize_bwd, summarize_with, PoolKind};
use crate::tensor::{
    add, add_bwd, gelu, gelu_bwd, layer_norm, layer_norm_bwd, matmul, matmul_bwd, softmax_rows, softmax_rows_bwd,
    LinearWeights, Matrix, NormParams, TensorMap,
};

pub const REL_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Per-coordinate step `1e-5 * (1 + |x|)`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// Numeric gradient of `f` at `x` over the coordinates `coords`.
#[derive(Clone, Debug)]
pub struct NumericGradient {
    pub coords: Vec<usize>,
    pub values: Vec<f64>,
    /// Coordinates whose one-sided slopes disagree, i.e. `x` sits on a kink
    /// of `f` (a max-pool tie within one step).
    pub non_smooth: Vec<bool>,
}

/// Central differences of `f` at `x`, evaluated only for `coords`.
/// A non-finite loss aborts with [`Error::NonFinite`].
pub fn finite_difference_grad<F>(mut f: F, x: &[f64], coords: &[usize]) -> Result<NumericGradient>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = |v: &[f64]| -> Result<f64> {
        let y = f(v)?;
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {y}")));
        }
        Ok(y)
    };
    let f0 = probe(x)?;
    let mut xs = x.to_vec();
    let mut values = Vec::with_capacity(coords.len());
    let mut non_smooth = Vec::with_capacity(coords.len());
    for &i in coords {
        let h = fd_step(x[i]);
        xs[i] = x[i] + h;
        let fp = probe(&xs)?;
        xs[i] = x[i] - h;
        let fm = probe(&xs)?;
        xs[i] = x[i];
        let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
        values.push((fp - fm) / (2.0 * h));
        non_smooth.push((right - left).abs() > 1e-3 * (right.abs() + left.abs()) + 1e-9);
    }
    Ok(NumericGradient { coords: coords.to_vec(), values, non_smooth })
}

/// Statistics of one named group of coordinates (one tensor).
#[derive(Clone, Debug, Default)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// `(instance, flat coordinate)` pairs above tolerance.
    pub failing: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub instances: usize,
    pub groups: Vec<GroupResult>,
}

/// More than this fraction of coordinates on kinks fails the op.
pub const MAX_SKIPPED_FRACTION: f64 = 0.02;

impl GradCheckReport {
    pub fn new(op: &str) -> Self {
        Self { op: op.to_string(), instances: 0, groups: Vec::new() }
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.groups.iter().map(|g| g.skipped).sum()
    }

    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.groups.iter().map(|g| g.max_abs).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checked() > 0
            && self.groups.iter().all(|g| g.failing.is_empty())
            && (self.skipped() as f64) <= MAX_SKIPPED_FRACTION * (self.checked() + self.skipped()) as f64
    }

    fn group_mut(&mut self, name: &str) -> &mut GroupResult {
        if let Some(i) = self.groups.iter().position(|g| g.group == name) {
            return &mut self.groups[i];
        }
        self.groups.push(GroupResult { group: name.to_string(), ..GroupResult::default() });
        self.groups.last_mut().unwrap()
    }

    /// Fold one instance into the report.
    pub fn record(&mut self, segments: &[(String, usize)], analytic: &[f64], numeric: &NumericGradient) {
        let instance = self.instances;
        self.instances += 1;
        let mut starts = Vec::with_capacity(segments.len());
        let mut at = 0;
        for (_, n) in segments {
            starts.push(at);
            at += n;
        }
        for (k, &i) in numeric.coords.iter().enumerate() {
            let seg = starts.partition_point(|&s| s <= i) - 1;
            let name = segment_group(&segments[seg].0);
            let g = self.group_mut(&name);
            if numeric.non_smooth[k] {
                g.skipped += 1;
                continue;
            }
            let (a, n) = (analytic[i], numeric.values[k]);
            let rel = relative_error(a, n);
            g.checked += 1;
            g.max_rel = g.max_rel.max(rel);
            g.max_abs = g.max_abs.max((a - n).abs());
            if rel > REL_TOLERANCE {
                g.failing.push((instance, i));
            }
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} ({} instances)", self.op, self.instances);
        let _ = writeln!(s, "  {:<28} {:>8} {:>8} {:>12} {:>12} {:>6}", "group", "checked", "skipped", "max_rel", "max_abs", "fails");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "  {:<28} {:>8} {:>8} {:>12.3e} {:>12.3e} {:>6}",
                g.group,
                g.checked,
                g.skipped,
                g.max_rel,
                g.max_abs,
                g.failing.len()
            );
        }
        s
    }

    pub const CSV_HEADER: &'static str = "op,group,instances,checked,skipped,max_rel,max_abs,failures";

    /// Rows without header, one per group.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e},{:e},{}",
                self.op,
                g.group,
                self.instances,
                g.checked,
                g.skipped,
                g.max_rel,
                g.max_abs,
                g.failing.len()
            );
        }
        s
    }
}

/// Reports group by tensor role, dropping block/scale indices, e.g.
/// `block1.scale0.td.q.weight` -> `td.q.weight`.
fn segment_group(name: &str) -> String {
    name.split('.')
        .filter(|p| !(p.starts_with("block") || p.starts_with("scale")) || p.starts_with("scale_"))
        .collect::<Vec<_>>()
        .join(".")
}

fn segments_of<P: ParamSet>(p: &P, prefix: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |n, _, v| out.push((n.to_string(), v.len())));
    out
}

/// Coordinates to probe: all of a segment if it is small, otherwise a
/// random subset of `per_segment`.
fn pick_coords<R: Rng + ?Sized>(segments: &[(String, usize)], per_segment: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    let mut at = 0;
    for (_, n) in segments {
        if *n <= per_segment {
            out.extend(at..at + n);
        } else {
            let mut idx: Vec<usize> = sample(rng, *n, per_segment).into_iter().map(|i| at + i).collect();
            idx.sort_unstable();
            out.extend(idx);
        }
        at += n;
    }
    out
}

/// Weights of the scalar test loss `sum(w * y)`, scaled so the loss stays
/// near 1e-2 and rounding noise in the differences stays far below the
/// relative-error floor.
fn loss_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let normal = rand_distr::StandardNormal;
    let s = 1e-2 / n as f64;
    (0..n).map(|_| s * rng.sample::<f64, _>(normal)).collect()
}

fn weighted(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn tmap_like(shape: [usize; 4], data: &[f64]) -> TensorMap {
    TensorMap::new(shape, data.to_vec()).expect("finite perturbation")
}

fn mat_like(m: &Matrix, data: &[f64]) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), data.to_vec()).expect("matching length")
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub instances: usize,
    /// Coordinates probed per tensor.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { instances: 20, coords_per_tensor: 12, seed: 7 }
    }
}

/// One gradient-check instance: flat inputs, their segment names, the
/// analytic gradient and a loss closure over perturbed inputs.
struct Instance<F: FnMut(&[f64]) -> Result<f64>> {
    segments: Vec<(String, usize)>,
    x: Vec<f64>,
    analytic: Vec<f64>,
    loss: F,
}

fn run_instance<F: FnMut(&[f64]) -> Result<f64>>(
    report: &mut GradCheckReport,
    inst: Instance<F>,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let coords = pick_coords(&inst.segments, per_tensor, rng);
    let numeric = finite_difference_grad(inst.loss, &inst.x, &coords)?;
    report.record(&inst.segments, &inst.analytic, &numeric);
    Ok(())
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn check_matmul(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let (n, k, m) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let a = Matrix::random_normal(n, k, 1.0, rng);
    let b = Matrix::random_normal(k, m, 1.0, rng);
    let w = loss_weights(n * m, rng);
    let (da, db) = matmul_bwd(&a, &b, &mat_like(&Matrix::zeros(n, m), &w))?;
    let inst = Instance {
        segments: vec![("a".into(), n * k), ("b".into(), k * m)],
        x: concat(&[a.as_slice(), b.as_slice()]),
        analytic: concat(&[da.as_slice(), db.as_slice()]),
        loss: |v: &[f64]| Ok(weighted(matmul(&mat_like(&a, &v[..n * k]), &mat_like(&b, &v[n * k..]))?.as_slice(), &w)),
    };
    run_instance(report, inst, per, rng)
}

fn check_linear(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let mut lin = LinearWeights::random(i, o, rng);
    jitter(&mut lin, 0.1, rng);
    let x = Matrix::random_normal(n, i, 1.0, rng);
    let w = loss_weights(n * o, rng);
    let mut g = lin.zeros_like();
    let dx = lin.backward(&x, &mat_like(&Matrix::zeros(n, o), &w), &mut g);
    let mut segments = vec![("x".to_string(), n * i)];
    segments.extend(segments_of(&lin, ""));
    let inst = Instance {
        segments,
        x: concat(&[x.as_slice(), &lin.flatten()]),
        analytic: concat(&[dx.as_slice(), &g.flatten()]),
        loss: |v: &[f64]| {
            let mut l = lin.clone();
            l.assign_flat(&v[n * i..]);
            Ok(weighted(l.forward(&mat_like(&x, &v[..n * i])).as_slice(), &w))
        },
    };
    run_instance(report, inst, per, rng)
}

fn check_softmax(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let (n, m) = (rng.random_range(1..4), rng.random_range(2..7));
    let x = Matrix::random_normal(n, m, 2.0, rng);
    let w = loss_weights(n * m, rng);
    let dx = softmax_rows_bwd(&softmax_rows(&x), &mat_like(&x, &w))?;
    let inst = Instance {
        segments: vec![("x".into(), n * m)],
        x: x.as_slice().to_vec(),
        analytic: dx.as_slice().to_vec(),
        loss: |v: &[f64]| Ok(weighted(softmax_rows(&mat_like(&x, v)).as_slice(), &w)),
    };
    run_instance(report, inst, per, rng)
}

fn check_layer_norm(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let c = rng.random_range(2..9);
    let shape = [1, rng.random_range(1..3), rng.random_range(1..3), c];
    let x = TensorMap::random_normal(shape, 1.0, rng);
    let mut norm = NormParams::new(c);
    jitter(&mut norm, 0.3, rng);
    let w = loss_weights(x.as_slice().len(), rng);
    let (_, ctx) = layer_norm(&x, &norm);
    let mut g = norm.zeros_like();
    let dx = layer_norm_bwd(&ctx, &norm, &tmap_like(shape, &w), &mut g)?;
    let nx = x.as_slice().len();
    let mut segments = vec![("x".to_string(), nx)];
    segments.extend(segments_of(&norm, ""));
    let inst = Instance {
        segments,
        x: concat(&[x.as_slice(), &norm.flatten()]),
        analytic: concat(&[dx.as_slice(), &g.flatten()]),
        loss: |v: &[f64]| {
            let mut nm = norm.clone();
            nm.assign_flat(&v[nx..]);
            Ok(weighted(layer_norm(&tmap_like(shape, &v[..nx]), &nm).0.as_slice(), &w))
        },
    };
    run_instance(report, inst, per, rng)
}

fn check_gelu(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let x = Matrix::random_normal(rng.random_range(1..4), rng.random_range(1..6), 2.0, rng);
    let w = loss_weights(x.as_slice().len(), rng);
    let dx = gelu_bwd(&x, &mat_like(&x, &w))?;
    let inst = Instance {
        segments: vec![("x".into(), x.as_slice().len())],
        x: x.as_slice().to_vec(),
        analytic: dx.as_slice().to_vec(),
        loss: |v: &[f64]| Ok(weighted(gelu(&mat_like(&x, v)).as_slice(), &w)),
    };
    run_instance(report, inst, per, rng)
}

fn check_add(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let shape = [1, 2, rng.random_range(1..4), 3];
    let a = TensorMap::random_normal(shape, 1.0, rng);
    let b = TensorMap::random_normal(shape, 1.0, rng);
    let w = loss_weights(a.as_slice().len(), rng);
    let (da, db) = add_bwd(&tmap_like(shape, &w));
    let n = a.as_slice().len();
    let inst = Instance {
        segments: vec![("a".into(), n), ("b".into(), n)],
        x: concat(&[a.as_slice(), b.as_slice()]),
        analytic: concat(&[da.as_slice(), db.as_slice()]),
        loss: |v: &[f64]| Ok(weighted(add(&tmap_like(shape, &v[..n]), &tmap_like(shape, &v[n..]))?.as_slice(), &w)),
    };
    run_instance(report, inst, per, rng)
}

fn check_summarize(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize, kind: PoolKind) -> Result<()> {
    let s = rng.random_range(2..4);
    let shape = [1, 2 * s, 2 * s, rng.random_range(1..4)];
    let x = TensorMap::random_normal(shape, 1.0, rng);
    let (y, ctx) = summarize_with(&x, s, kind)?;
    let w = loss_weights(y.as_slice().len(), rng);
    let dx = summarize_bwd(&tmap_like(y.shape(), &w), &ctx)?;
    let inst = Instance {
        segments: vec![("x".into(), x.as_slice().len())],
        x: x.as_slice().to_vec(),
        analytic: dx.as_slice().to_vec(),
        loss: |v: &[f64]| Ok(weighted(summarize_with(&tmap_like(shape, v), s, kind)?.0.as_slice(), &w)),
    };
    run_instance(report, inst, per, rng)
}

fn random_mha(rng: &mut ChaCha8Rng, c: usize, h: usize) -> Result<MhaParams> {
    let mut p = MhaParams::new(c, h, rng)?;
    jitter(&mut p, 0.1, rng);
    Ok(p)
}

fn check_mha(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let h = rng.random_range(1..3);
    let c = 2 * h * rng.random_range(1..3);
    let (nq, nk) = (rng.random_range(1..5), rng.random_range(1..6));
    let p = random_mha(rng, c, h)?;
    let q = Matrix::random_normal(nq, c, 1.0, rng);
    let k = Matrix::random_normal(nk, c, 1.0, rng);
    let v = Matrix::random_normal(nk, c, 1.0, rng);
    let w = loss_weights(nq * c, rng);
    let (_, ctx) = mha_forward(&p, &q, &k, &v)?;
    let mut g = p.zeros_like();
    let (dq, dk, dv) = mha_backward(&p, &ctx, &mat_like(&q, &w), &mut g)?;
    let (a, b) = (nq * c, nk * c);
    let mut segments = vec![("queries".to_string(), a), ("keys".into(), b), ("values".into(), b)];
    segments.extend(segments_of(&p, ""));
    let inst = Instance {
        segments,
        x: concat(&[q.as_slice(), k.as_slice(), v.as_slice(), &p.flatten()]),
        analytic: concat(&[dq.as_slice(), dk.as_slice(), dv.as_slice(), &g.flatten()]),
        loss: |x: &[f64]| {
            let mut pp = p.clone();
            pp.assign_flat(&x[a + 2 * b..]);
            let out = mha_forward(&pp, &mat_like(&q, &x[..a]), &mat_like(&k, &x[a..a + b]), &mat_like(&v, &x[a + b..a + 2 * b]))?;
            Ok(weighted(out.0.as_slice(), &w))
        },
    };
    run_instance(report, inst, per, rng)
}

fn check_window_attention(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize, first: bool) -> Result<()> {
    // The first instance is the fixed 2x2 grid, k = 2, h = 1, C = 4 case.
    let (grid, k, h, c) = if first { (2, 2, 1, 4) } else { (4, 2, rng.random_range(1..3), 4) };
    let layout = LayoutSpec::build(grid, k, 2)?;
    let p = random_mha(rng, c, h)?;
    let shape = [1, grid, grid, c];
    let x = TensorMap::random_normal(shape, 1.0, rng);
    let w = loss_weights(x.as_slice().len(), rng);
    let (_, ctx) = window_self_attention_forward(&p, &x, &layout, 0)?;
    let mut g = p.zeros_like();
    let dx = window_self_attention_backward(&p, &ctx, &layout, &tmap_like(shape, &w), &mut g)?;
    let nx = x.as_slice().len();
    let mut segments = vec![("x".to_string(), nx)];
    segments.extend(segments_of(&p, ""));
    let inst = Instance {
        segments,
        x: concat(&[x.as_slice(), &p.flatten()]),
        analytic: concat(&[dx.as_slice(), &g.flatten()]),
        loss: |v: &[f64]| {
            let mut pp = p.clone();
            pp.assign_flat(&v[nx..]);
            Ok(weighted(window_self_attention_forward(&pp, &tmap_like(shape, &v[..nx]), &layout, 0)?.0.as_slice(), &w))
        },
    };
    run_instance(report, inst, per, rng)
}

fn random_scales(layout: &LayoutSpec, c: usize, rng: &mut ChaCha8Rng) -> Vec<TensorMap> {
    (0..layout.levels())
        .map(|l| TensorMap::random_normal([1, layout.grid_side(l), layout.grid_side(l), c], 1.0, rng))
        .collect()
}

fn check_top_down(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let grid = if rng.random_bool(0.5) { 8 } else { 16 };
    let layout = LayoutSpec::build(grid, 4, 2)?;
    let (c, h) = (4, rng.random_range(1..3));
    let levels = layout.levels();
    let params: Vec<MhaParams> = (0..levels).map(|_| random_mha(rng, c, h)).collect::<Result<_>>()?;
    let feats = random_scales(&layout, c, rng);
    let w = loss_weights(feats[0].as_slice().len(), rng);
    let sources: Vec<ScaleSource> = (0..levels).map(|m| ScaleSource { params: &params[m], features: &feats[m] }).collect();
    let (_, trace) = top_down_attention(&layout, 0, &sources, None, &mut OpCounter::new(), true)?;
    let trace = trace.ok_or_else(|| Error::Invariant("no trace".into()))?;
    let mut grads: Vec<MhaParams> = params.iter().map(|p| p.zeros_like()).collect();
    let mut refs: Vec<&mut MhaParams> = grads.iter_mut().collect();
    let d_feats = top_down_attention_backward(&layout, &sources, &trace, &tmap_like(feats[0].shape(), &w), &mut refs)?;

    let mut segments = Vec::new();
    let mut x = Vec::new();
    let mut analytic = Vec::new();
    for m in 0..levels {
        segments.push((format!("features.scale_{m}"), feats[m].as_slice().len()));
        x.extend_from_slice(feats[m].as_slice());
        analytic.extend_from_slice(d_feats[m].as_slice());
    }
    for m in 0..levels {
        segments.extend(segments_of(&params[m], &format!("params.scale_{m}")));
        x.extend(params[m].flatten());
        analytic.extend(grads[m].flatten());
    }
    let inst = Instance {
        segments,
        x,
        analytic,
        loss: |v: &[f64]| {
            let mut at = 0;
            let mut fs = Vec::new();
            for f in &feats {
                let n = f.as_slice().len();
                fs.push(tmap_like(f.shape(), &v[at..at + n]));
                at += n;
            }
            let mut ps = params.clone();
            for p in &mut ps {
                let n = p.num_params();
                p.assign_flat(&v[at..at + n]);
                at += n;
            }
            let src: Vec<ScaleSource> = (0..levels).map(|m| ScaleSource { params: &ps[m], features: &fs[m] }).collect();
            let (out, _) = top_down_attention(&layout, 0, &src, None, &mut OpCounter::new(), false)?;
            Ok(weighted(out.as_slice(), &w))
        },
    };
    run_instance(report, inst, per, rng)
}

fn check_bottom_up(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let layout = LayoutSpec::build(8, 4, 2)?;
    let (c, h) = (4, rng.random_range(1..3));
    let p = random_mha(rng, c, h)?;
    let feats = random_scales(&layout, c, rng);
    let (q, ctxm) = (&feats[1], &feats[0]);
    let w = loss_weights(q.as_slice().len(), rng);
    let (_, trace) = bottom_up_attention(&layout, 1, &p, q, ctxm, None, &mut OpCounter::new(), true)?;
    let trace = trace.ok_or_else(|| Error::Invariant("no trace".into()))?;
    let mut g = p.zeros_like();
    let (dq, dc) = bottom_up_attention_backward(&layout, &p, q, ctxm, &trace, &tmap_like(q.shape(), &w), &mut g)?;
    let (nq, nc) = (q.as_slice().len(), ctxm.as_slice().len());
    let mut segments = vec![("queries".to_string(), nq), ("context".into(), nc)];
    segments.extend(segments_of(&p, ""));
    let inst = Instance {
        segments,
        x: concat(&[q.as_slice(), ctxm.as_slice(), &p.flatten()]),
        analytic: concat(&[dq.as_slice(), dc.as_slice(), &g.flatten()]),
        loss: |v: &[f64]| {
            let mut pp = p.clone();
            pp.assign_flat(&v[nq + nc..]);
            let (qq, cc) = (tmap_like(q.shape(), &v[..nq]), tmap_like(ctxm.shape(), &v[nq..nq + nc]));
            let (out, _) = bottom_up_attention(&layout, 1, &pp, &qq, &cc, None, &mut OpCounter::new(), false)?;
            Ok(weighted(out.as_slice(), &w))
        },
    };
    run_instance(report, inst, per, rng)
}

/// Block gradient check on `B = 1`, grid 8, k = 4, s = 2, C = 8, h = 2.
fn check_block(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize, mode: CommunicationMode) -> Result<()> {
    let layout = LayoutSpec::build(8, 4, 2)?;
    let mut params = MsaBlockParams::new(&layout, 0, 8, 2, rng)?;
    jitter(&mut params, 0.1, rng);
    let maps = random_scales(&layout, 8, rng);
    let state = MultiScaleState::new(&layout, maps.clone(), 0)?;
    let ws: Vec<Vec<f64>> = maps.iter().map(|m| loss_weights(m.as_slice().len(), rng)).collect();
    let mut fwd = state.clone();
    let ctx = msa_block_forward_train(&params, &layout, &mut fwd, mode, None, &mut OpCounter::new())?;
    let up: Vec<TensorMap> = maps.iter().zip(&ws).map(|(m, w)| tmap_like(m.shape(), w)).collect();
    let mut g = params.zeros_like();
    let d = msa_block_backward(&params, &layout, &ctx, &up, &mut g)?;

    let mut segments = Vec::new();
    let mut x = Vec::new();
    let mut analytic = Vec::new();
    for (l, m) in maps.iter().enumerate() {
        segments.push((format!("input.scale_{l}"), m.as_slice().len()));
        x.extend_from_slice(m.as_slice());
        analytic.extend_from_slice(d[l].as_slice());
    }
    segments.extend(segments_of(&params, ""));
    x.extend(params.flatten());
    analytic.extend(g.flatten());
    let n_in: usize = maps.iter().map(|m| m.as_slice().len()).sum();
    let inst = Instance {
        segments,
        x,
        analytic,
        loss: |v: &[f64]| {
            let mut at = 0;
            let mut ms = Vec::new();
            for m in &maps {
                let n = m.as_slice().len();
                ms.push(tmap_like(m.shape(), &v[at..at + n]));
                at += n;
            }
            let mut p = params.clone();
            p.assign_flat(&v[n_in..]);
            let mut st = MultiScaleState::new(&layout, ms, 0)?;
            msa_block_forward_train(&p, &layout, &mut st, mode, None, &mut OpCounter::new())?;
            Ok(st.maps().iter().zip(&ws).map(|(m, w)| weighted(m.as_slice(), w)).sum())
        },
    };
    run_instance(report, inst, per, rng)
}

/// The micro configuration used for end-to-end model checks.
pub fn micro_atlas_config() -> AtlasConfig {
    AtlasConfig {
        image_side: 32,
        patch: 4,
        in_channels: 1,
        window: 4,
        stride: 2,
        channels: 8,
        heads: 2,
        depths: vec![1, 1],
        classes: 3,
        ..AtlasConfig::default()
    }
}

/// End-to-end check of the model on `1e-2 * cross_entropy`.
fn check_atlas(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize, config: &AtlasConfig) -> Result<()> {
    let mut cfg = config.clone();
    cfg.seed = rng.random();
    let mut model = AtlasModel::new(cfg.clone())?;
    jitter(&mut model.params, 0.05, rng);
    let b = 2;
    let images = TensorMap::random_normal([b, cfg.image_side, cfg.image_side, cfg.in_channels], 1.0, rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..cfg.classes)).collect();
    let scale = 1e-2;
    let (logits, ctx) = model.forward_train(&images, &mut OpCounter::new())?;
    let (_, mut d_logits) = cross_entropy(&logits, &labels)?;
    for v in d_logits.as_mut_slice() {
        *v *= scale;
    }
    let g = model.backward(&ctx, &d_logits)?;
    let base = model.params.clone();
    let inst = Instance {
        segments: segments_of(&base, ""),
        x: base.flatten(),
        analytic: g.flatten(),
        loss: |v: &[f64]| {
            let mut m = model.clone();
            m.params.assign_flat(v);
            let logits = m.forward(&images, false, &mut OpCounter::new())?;
            Ok(scale * cross_entropy(&logits, &labels)?.0)
        },
    };
    run_instance(report, inst, per, rng)
}

fn check_cross_entropy(rng: &mut ChaCha8Rng, report: &mut GradCheckReport, per: usize) -> Result<()> {
    let (n, k) = (rng.random_range(1..4), rng.random_range(2..6));
    let logits = Matrix::random_normal(n, k, 2.0, rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let (_, d) = cross_entropy(&logits, &labels)?;
    let inst = Instance {
        segments: vec![("logits".into(), n * k)],
        x: logits.as_slice().to_vec(),
        analytic: d.as_slice().to_vec(),
        loss: |v: &[f64]| Ok(cross_entropy(&mat_like(&logits, v), &labels)?.0),
    };
    run_instance(report, inst, per, rng)
}

/// Names of the ops covered by [`gradcheck_suite`], in run order.
pub const SUITE_OPS: [&str; 15] = [
    "matmul",
    "linear",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "add",
    "summarize_max",
    "summarize_mean",
    "cross_entropy",
    "mha",
    "window_self_attention",
    "top_down_attention",
    "bottom_up_attention",
    "msa_block",
    "atlas_end_to_end",
];

/// Check one op of [`SUITE_OPS`] on `opts.instances` random instances.
pub fn gradcheck_op(op: &str, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ fxhash(op));
    let mut report = GradCheckReport::new(op);
    let per = opts.coords_per_tensor;
    let micro = micro_atlas_config();
    for i in 0..opts.instances {
        let r = &mut rng;
        let rep = &mut report;
        match op {
            "matmul" => check_matmul(r, rep, per)?,
            "linear" => check_linear(r, rep, per)?,
            "softmax_rows" => check_softmax(r, rep, per)?,
            "layer_norm" => check_layer_norm(r, rep, per)?,
            "gelu" => check_gelu(r, rep, per)?,
            "add" => check_add(r, rep, per)?,
            "summarize_max" => check_summarize(r, rep, per, PoolKind::Max)?,
            "summarize_mean" => check_summarize(r, rep, per, PoolKind::Mean)?,
            "cross_entropy" => check_cross_entropy(r, rep, per)?,
            "mha" => check_mha(r, rep, per)?,
            "window_self_attention" => check_window_attention(r, rep, per, i == 0)?,
            "top_down_attention" => check_top_down(r, rep, per)?,
            "bottom_up_attention" => check_bottom_up(r, rep, per)?,
            "msa_block" => {
                let mode = CommunicationMode::ALL[i % CommunicationMode::ALL.len()];
                check_block(r, rep, per, mode)?
            }
            "atlas_end_to_end" => check_atlas(r, rep, per, &micro)?,
            other => return Err(Error::Usage(format!("unknown gradcheck op '{other}'"))),
        }
    }
    Ok(report)
}

pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<GradCheckReport>> {
    SUITE_OPS.iter().map(|op| gradcheck_op(op, opts)).collect()
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}
