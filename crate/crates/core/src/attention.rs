//! Multi-head attention and the three attention patterns of a block:
//! intra-window self-attention, top-down attention over a window and its
//! ancestors, and bottom-up attention from coarse token groups into their
//! parent window.

use std::sync::Arc;

use rand::Rng;

use crate::cache::{acquire, Pathway, QkvCache, Role, SlotKey};
use crate::counter::OpCounter;
use crate::error::{config_err, usage_err, Error, Result};
use crate::layout::LayoutSpec;
use crate::params::{join, ParamSet};
use crate::tensor::{dot, dot_rows, softmax_in_place, LinearWeights, Matrix, TensorMap};

#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub q: LinearWeights,
    pub k: LinearWeights,
    pub v: LinearWeights,
    pub o: LinearWeights,
}

impl MhaParams {
    pub fn new<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(Self {
            heads,
            q: LinearWeights::random(channels, channels, rng),
            k: LinearWeights::random(channels, channels, rng),
            v: LinearWeights::random(channels, channels, rng),
            o: LinearWeights::random(channels, channels, rng),
        })
    }

    /// All four projections are the identity.
    pub fn identity(channels: usize, heads: usize) -> Result<Self> {
        check_heads(channels, heads)?;
        let id = LinearWeights::identity(channels);
        Ok(Self { heads, q: id.clone(), k: id.clone(), v: id.clone(), o: id })
    }

    pub fn channels(&self) -> usize {
        self.q.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn projection(&self, role: Role) -> &LinearWeights {
        match role {
            Role::Query => &self.q,
            Role::Key => &self.k,
            Role::Value => &self.v,
        }
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels == 0 || channels % heads != 0 {
        return Err(config_err!("channels {channels} must be a positive multiple of heads {heads}"));
    }
    Ok(())
}

impl ParamSet for MhaParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}

/// Per-head softmax(Q K^T / sqrt(d_k)) V on already projected matrices.
/// Returns the concatenated head outputs and, if requested, the attention
/// probabilities of every head.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    keep_probs: bool,
) -> (Matrix, Vec<Matrix>) {
    let (nq, nk, c) = (q.rows(), k.rows(), q.cols());
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Matrix::zeros(nq, c);
    let mut probs = Vec::with_capacity(if keep_probs { heads } else { 0 });
    let mut p = Matrix::zeros(nq, nk);
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..nq {
            let qi = &q.row(i)[cols.clone()];
            let pr = p.row_mut(i);
            dot_rows(qi, |j| &k.row(j)[cols.clone()], pr);
            for x in pr.iter_mut() {
                *x *= scale;
            }
            softmax_in_place(pr);
            let or = &mut out.row_mut(i)[cols.clone()];
            for j in 0..nk {
                let pij = p.get(i, j);
                let vj = &v.row(j)[cols.clone()];
                for d in 0..dk {
                    or[d] += pij * vj[d];
                }
            }
        }
        if keep_probs {
            probs.push(p.clone());
        }
    }
    (out, probs)
}

/// Backward of [`scaled_dot_attention`]: returns `(dQ, dK, dV)`.
pub fn scaled_dot_attention_bwd(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
    d_out: &Matrix,
    heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let (nq, nk, c) = (q.rows(), k.rows(), q.cols());
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Matrix::zeros(nq, c);
    let mut dkm = Matrix::zeros(nk, c);
    let mut dv = Matrix::zeros(nk, c);
    let mut dp = vec![0.0; nk];
    for (h, p) in probs.iter().enumerate() {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..nq {
            let doi = &d_out.row(i)[cols.clone()];
            let pr = p.row(i);
            for j in 0..nk {
                dp[j] = dot(doi, &v.row(j)[cols.clone()]);
                let dvj = &mut dv.row_mut(j)[cols.clone()];
                for d in 0..dk {
                    dvj[d] += pr[j] * doi[d];
                }
            }
            let s = dot(pr, &dp);
            let qi = q.row(i)[cols.clone()].to_vec();
            for j in 0..nk {
                let ds = pr[j] * (dp[j] - s) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k.row(j)[cols.clone()];
                let dqi = &mut dq.row_mut(i)[cols.clone()];
                for d in 0..dk {
                    dqi[d] += ds * kj[d];
                }
                let dkj = &mut dkm.row_mut(j)[cols.clone()];
                for d in 0..dk {
                    dkj[d] += ds * qi[d];
                }
            }
        }
    }
    (dq, dkm, dv)
}

/// Saved state of [`mha_forward`].
#[derive(Clone, Debug)]
pub struct MhaContext {
    queries: Matrix,
    keys: Matrix,
    values: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
}

fn check_mha_shapes(params: &MhaParams, queries: &Matrix, keys: &Matrix, values: &Matrix) -> Result<()> {
    let c = params.channels();
    if queries.cols() != c || keys.cols() != c || values.cols() != c {
        return Err(usage_err!("mha: token widths must all equal {c}"));
    }
    if keys.rows() != values.rows() {
        return Err(usage_err!("mha: {} keys but {} values", keys.rows(), values.rows()));
    }
    if keys.rows() == 0 {
        return Err(usage_err!("mha: empty key set"));
    }
    Ok(())
}

/// Multi-head attention of `queries` over `keys`/`values` token matrices,
/// including all four projections.
pub fn mha(params: &MhaParams, queries: &Matrix, keys: &Matrix, values: &Matrix) -> Result<Matrix> {
    check_mha_shapes(params, queries, keys, values)?;
    let q = params.q.forward(queries);
    let k = params.k.forward(keys);
    let v = params.v.forward(values);
    let (concat, _) = scaled_dot_attention(&q, &k, &v, params.heads, false);
    Ok(params.o.forward(&concat))
}

pub fn mha_forward(
    params: &MhaParams,
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
) -> Result<(Matrix, MhaContext)> {
    check_mha_shapes(params, queries, keys, values)?;
    let q = params.q.forward(queries);
    let k = params.k.forward(keys);
    let v = params.v.forward(values);
    let (concat, probs) = scaled_dot_attention(&q, &k, &v, params.heads, true);
    let out = params.o.forward(&concat);
    let ctx = MhaContext {
        queries: queries.clone(),
        keys: keys.clone(),
        values: values.clone(),
        q,
        k,
        v,
        probs,
        concat,
    };
    Ok((out, ctx))
}

/// Returns `(d_queries, d_keys, d_values)`; parameter gradients are added
/// into `grads`.
pub fn mha_backward(
    params: &MhaParams,
    ctx: &MhaContext,
    d_out: &Matrix,
    grads: &mut MhaParams,
) -> Result<(Matrix, Matrix, Matrix)> {
    if (d_out.rows(), d_out.cols()) != (ctx.queries.rows(), params.channels()) {
        return Err(usage_err!("mha_backward: upstream gradient does not match the saved forward"));
    }
    let d_concat = params.o.backward(&ctx.concat, d_out, &mut grads.o);
    let (dq, dk, dv) = scaled_dot_attention_bwd(&ctx.q, &ctx.k, &ctx.v, &ctx.probs, &d_concat, params.heads);
    let d_queries = params.q.backward(&ctx.queries, &dq, &mut grads.q);
    let d_keys = params.k.backward(&ctx.keys, &dk, &mut grads.k);
    let d_values = params.v.backward(&ctx.values, &dv, &mut grads.v);
    Ok((d_queries, d_keys, d_values))
}

fn check_scale_map(layout: &LayoutSpec, scale: usize, x: &TensorMap, what: &str) -> Result<()> {
    if scale >= layout.levels() {
        return Err(usage_err!("{what}: scale {scale} outside layout with {} scales", layout.levels()));
    }
    let side = layout.grid_side(scale);
    if x.height() != side || x.width() != side {
        return Err(usage_err!(
            "{what}: scale {scale} map is {}x{}, layout expects {side}x{side}",
            x.height(),
            x.width()
        ));
    }
    Ok(())
}

/// Saved state of [`window_self_attention_forward`].
#[derive(Clone, Debug)]
pub struct WindowAttentionContext {
    scale: usize,
    windows: Vec<MhaContext>,
}

/// Standard MHSA inside every window of `scale`, windows merged back.
pub fn window_self_attention(params: &MhaParams, x: &TensorMap, layout: &LayoutSpec, scale: usize) -> Result<TensorMap> {
    check_scale_map(layout, scale, x, "window_self_attention")?;
    let mut out = TensorMap::zeros(x.shape());
    for b in 0..x.batch() {
        for w in 0..layout.num_windows(scale) {
            let ids = layout.window_tokens(scale, w);
            let t = x.gather(b, ids);
            out.scatter(b, ids, &mha(params, &t, &t, &t)?);
        }
    }
    Ok(out)
}

pub fn window_self_attention_forward(
    params: &MhaParams,
    x: &TensorMap,
    layout: &LayoutSpec,
    scale: usize,
) -> Result<(TensorMap, WindowAttentionContext)> {
    check_scale_map(layout, scale, x, "window_self_attention")?;
    let mut out = TensorMap::zeros(x.shape());
    let mut windows = Vec::new();
    for b in 0..x.batch() {
        for w in 0..layout.num_windows(scale) {
            let ids = layout.window_tokens(scale, w);
            let t = x.gather(b, ids);
            let (o, ctx) = mha_forward(params, &t, &t, &t)?;
            out.scatter(b, ids, &o);
            windows.push(ctx);
        }
    }
    Ok((out, WindowAttentionContext { scale, windows }))
}

pub fn window_self_attention_backward(
    params: &MhaParams,
    ctx: &WindowAttentionContext,
    layout: &LayoutSpec,
    d_out: &TensorMap,
    grads: &mut MhaParams,
) -> Result<TensorMap> {
    check_scale_map(layout, ctx.scale, d_out, "window_self_attention_backward")?;
    let nw = layout.num_windows(ctx.scale);
    if ctx.windows.len() != d_out.batch() * nw {
        return Err(usage_err!("window_self_attention_backward: context is from a different batch"));
    }
    let mut dx = TensorMap::zeros(d_out.shape());
    for (i, wctx) in ctx.windows.iter().enumerate() {
        let (b, w) = (i / nw, i % nw);
        let ids = layout.window_tokens(ctx.scale, w);
        let (dq, dk, dv) = mha_backward(params, wctx, &d_out.gather(b, ids), grads)?;
        dx.scatter_add(b, ids, &dq);
        dx.scatter_add(b, ids, &dk);
        dx.scatter_add(b, ids, &dv);
    }
    Ok(dx)
}

/// One scale participating in a top-down attention: its (normalized)
/// features and the parameters its projections use.
#[derive(Clone, Copy)]
pub struct ScaleSource<'a> {
    pub params: &'a MhaParams,
    pub features: &'a TensorMap,
}

/// Where one concatenated key block came from.
#[derive(Clone, Debug)]
struct KeyPart {
    source: usize,
    window: usize,
    k: Arc<Matrix>,
    v: Arc<Matrix>,
}

#[derive(Clone, Debug)]
struct WindowTrace {
    batch: usize,
    /// Window (top-down) or token group (bottom-up) index at the query scale.
    slot: usize,
    q: Arc<Matrix>,
    parts: Vec<KeyPart>,
    probs: Vec<Matrix>,
    concat: Matrix,
}

/// Saved state of a top-down or bottom-up attention forward.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    scale: usize,
    batch: usize,
    windows: Vec<WindowTrace>,
}

impl AttentionTrace {
    pub fn scale(&self) -> usize {
        self.scale
    }
}

/// Top-down attention at `scale`: every window's queries attend to the
/// concatenation of its own keys and the keys of its ancestor window at each
/// coarser scale, in order `scale, scale + 1, ...`.
///
/// `sources[0]` is the query scale itself and `sources[i]` is scale
/// `scale + i`; passing only `sources[0]` gives plain windowed
/// self-attention. Key and value projections of scale `scale + i` use
/// `sources[i].params`; queries and the output projection use
/// `sources[0].params`.
pub fn top_down_attention(
    layout: &LayoutSpec,
    scale: usize,
    sources: &[ScaleSource<'_>],
    mut cache: Option<&mut QkvCache>,
    counter: &mut OpCounter,
    record: bool,
) -> Result<(TensorMap, Option<AttentionTrace>)> {
    let Some(own) = sources.first() else {
        return Err(usage_err!("top_down_attention: no sources"));
    };
    if scale + sources.len() > layout.levels() {
        return Err(usage_err!(
            "top_down_attention: {} sources from scale {scale} exceed {} scales",
            sources.len(),
            layout.levels()
        ));
    }
    for (i, s) in sources.iter().enumerate() {
        check_scale_map(layout, scale + i, s.features, "top_down_attention")?;
        if s.features.batch() != own.features.batch() || s.params.channels() != s.features.channels() {
            return Err(usage_err!("top_down_attention: source {i} batch/channels mismatch"));
        }
    }
    let params = own.params;
    let batch = own.features.batch();
    let nw = layout.num_windows(scale);
    let mut out = TensorMap::zeros(own.features.shape());
    let mut traces = Vec::with_capacity(if record { batch * nw } else { 0 });

    for b in 0..batch {
        for w in 0..nw {
            let ids = layout.window_tokens(scale, w);
            let q = acquire(
                cache.as_deref_mut(),
                SlotKey { pathway: Pathway::TopDown, scale, slot: b * nw + w },
                Role::Query,
                || own.features.gather(b, ids),
                &params.q,
                counter,
            );
            let mut parts = Vec::with_capacity(sources.len());
            for (i, src) in sources.iter().enumerate() {
                let m = scale + i;
                let win = if i == 0 { w } else { layout.ancestor_window(scale, w, m) };
                let key = SlotKey { pathway: Pathway::TopDown, scale: m, slot: b * layout.num_windows(m) + win };
                let src_ids = layout.window_tokens(m, win);
                let k = acquire(
                    cache.as_deref_mut(),
                    key,
                    Role::Key,
                    || src.features.gather(b, src_ids),
                    &src.params.k,
                    counter,
                );
                let v = acquire(
                    cache.as_deref_mut(),
                    key,
                    Role::Value,
                    || src.features.gather(b, src_ids),
                    &src.params.v,
                    counter,
                );
                parts.push(KeyPart { source: i, window: win, k, v });
            }
            let (o, trace) = attend_parts(params, b, w, q, parts, counter, record)?;
            out.scatter(b, ids, &o);
            traces.extend(trace);
        }
    }
    Ok((out, record.then_some(AttentionTrace { scale, batch, windows: traces })))
}

fn attend_parts(
    params: &MhaParams,
    batch: usize,
    slot: usize,
    q: Arc<Matrix>,
    parts: Vec<KeyPart>,
    counter: &mut OpCounter,
    record: bool,
) -> Result<(Matrix, Option<WindowTrace>)> {
    let k_refs: Vec<&Matrix> = parts.iter().map(|p| p.k.as_ref()).collect();
    let v_refs: Vec<&Matrix> = parts.iter().map(|p| p.v.as_ref()).collect();
    let (k, v) = if parts.len() == 1 {
        ((*parts[0].k).clone(), (*parts[0].v).clone())
    } else {
        (Matrix::vstack(&k_refs)?, Matrix::vstack(&v_refs)?)
    };
    counter.record_attention(q.rows(), k.rows(), params.channels());
    let (concat, probs) = scaled_dot_attention(&q, &k, &v, params.heads, record);
    counter.record_linear(concat.rows(), params.channels(), params.channels());
    let o = params.o.forward(&concat);
    let trace = record.then(|| WindowTrace { batch, slot, q, parts, probs, concat });
    Ok((o, trace))
}

/// Backprop one window trace through the output projection and the
/// attention core; returns `(dQ, [(dK_part, dV_part)])`.
fn attend_parts_bwd(
    params: &MhaParams,
    t: &WindowTrace,
    d_out: &Matrix,
    grads_o: &mut LinearWeights,
) -> Result<(Matrix, Vec<(Matrix, Matrix)>)> {
    let d_concat = params.o.backward(&t.concat, d_out, grads_o);
    let k_refs: Vec<&Matrix> = t.parts.iter().map(|p| p.k.as_ref()).collect();
    let v_refs: Vec<&Matrix> = t.parts.iter().map(|p| p.v.as_ref()).collect();
    let k = Matrix::vstack(&k_refs)?;
    let v = Matrix::vstack(&v_refs)?;
    let (dq, dk, dv) = scaled_dot_attention_bwd(&t.q, &k, &v, &t.probs, &d_concat, params.heads);
    let mut split = Vec::with_capacity(t.parts.len());
    let mut at = 0;
    for p in &t.parts {
        let n = p.k.rows();
        split.push((dk.row_block(at, n), dv.row_block(at, n)));
        at += n;
    }
    Ok((dq, split))
}

/// Backward of [`top_down_attention`]. Returns the gradient for each
/// source's features; parameter gradients are added into `grads[i]` for
/// source `i`.
pub fn top_down_attention_backward(
    layout: &LayoutSpec,
    sources: &[ScaleSource<'_>],
    trace: &AttentionTrace,
    d_out: &TensorMap,
    grads: &mut [&mut MhaParams],
) -> Result<Vec<TensorMap>> {
    let scale = trace.scale;
    if sources.is_empty() || grads.len() != sources.len() {
        return Err(usage_err!("top_down_attention_backward: {} sources but {} gradient sets", sources.len(), grads.len()));
    }
    if d_out.shape() != sources[0].features.shape() || d_out.batch() != trace.batch {
        return Err(usage_err!("top_down_attention_backward: upstream gradient does not match the saved forward"));
    }
    let mut d_feats: Vec<TensorMap> = sources.iter().map(|s| TensorMap::zeros(s.features.shape())).collect();
    let params = sources[0].params;
    for t in &trace.windows {
        let ids = layout.window_tokens(scale, t.slot);
        let (dq, parts) = attend_parts_bwd(params, t, &d_out.gather(t.batch, ids), &mut grads[0].o)?;
        let dx = params.q.backward(&sources[0].features.gather(t.batch, ids), &dq, &mut grads[0].q);
        d_feats[0].scatter_add(t.batch, ids, &dx);
        for (p, (dk, dv)) in t.parts.iter().zip(parts) {
            let i = p.source;
            let src = sources.get(i).ok_or_else(|| usage_err!("trace references missing source {i}"))?;
            let src_ids = layout.window_tokens(scale + i, p.window);
            let x = src.features.gather(t.batch, src_ids);
            let dxk = src.params.k.backward(&x, &dk, &mut grads[i].k);
            let dxv = src.params.v.backward(&x, &dv, &mut grads[i].v);
            d_feats[i].scatter_add(t.batch, src_ids, &dxk);
            d_feats[i].scatter_add(t.batch, src_ids, &dxv);
        }
    }
    Ok(d_feats)
}

/// Bottom-up attention into coarse `scale >= 1`: each group of coarse tokens
/// summarizing one window of `scale - 1` attends to that window's tokens.
/// `queries` holds the coarse features, `context` the finer ones.
pub fn bottom_up_attention(
    layout: &LayoutSpec,
    scale: usize,
    params: &MhaParams,
    queries: &TensorMap,
    context: &TensorMap,
    mut cache: Option<&mut QkvCache>,
    counter: &mut OpCounter,
    record: bool,
) -> Result<(TensorMap, Option<AttentionTrace>)> {
    if scale == 0 {
        return Err(usage_err!("bottom_up_attention needs a coarse scale >= 1"));
    }
    check_scale_map(layout, scale, queries, "bottom_up_attention")?;
    check_scale_map(layout, scale - 1, context, "bottom_up_attention")?;
    if queries.batch() != context.batch() {
        return Err(usage_err!("bottom_up_attention: batch mismatch"));
    }
    let pathway = Pathway::BottomUp { target: scale };
    let groups = layout.num_groups(scale);
    let fine_windows = layout.num_windows(scale - 1);
    let batch = queries.batch();
    let mut out = TensorMap::zeros(queries.shape());
    let mut traces = Vec::with_capacity(if record { batch * groups } else { 0 });
    for b in 0..batch {
        for g in 0..groups {
            let ids = layout.group_tokens(scale, g);
            let parent = layout.parent_window(scale, g);
            let fine_ids = layout.window_tokens(scale - 1, parent);
            let q = acquire(
                cache.as_deref_mut(),
                SlotKey { pathway, scale, slot: b * groups + g },
                Role::Query,
                || queries.gather(b, ids),
                &params.q,
                counter,
            );
            let key = SlotKey { pathway, scale: scale - 1, slot: b * fine_windows + parent };
            let k = acquire(cache.as_deref_mut(), key, Role::Key, || context.gather(b, fine_ids), &params.k, counter);
            let v = acquire(cache.as_deref_mut(), key, Role::Value, || context.gather(b, fine_ids), &params.v, counter);
            let parts = vec![KeyPart { source: 1, window: parent, k, v }];
            let (o, trace) = attend_parts(params, b, g, q, parts, counter, record)?;
            out.scatter(b, ids, &o);
            traces.extend(trace);
        }
    }
    Ok((out, record.then_some(AttentionTrace { scale, batch, windows: traces })))
}

/// Backward of [`bottom_up_attention`]: returns `(d_queries, d_context)`.
pub fn bottom_up_attention_backward(
    layout: &LayoutSpec,
    params: &MhaParams,
    queries: &TensorMap,
    context: &TensorMap,
    trace: &AttentionTrace,
    d_out: &TensorMap,
    grads: &mut MhaParams,
) -> Result<(TensorMap, TensorMap)> {
    let scale = trace.scale;
    if d_out.shape() != queries.shape() || d_out.batch() != trace.batch {
        return Err(usage_err!("bottom_up_attention_backward: upstream gradient does not match the saved forward"));
    }
    let mut dq_map = TensorMap::zeros(queries.shape());
    let mut dc_map = TensorMap::zeros(context.shape());
    for t in &trace.windows {
        let ids = layout.group_tokens(scale, t.slot);
        let (dq, parts) = attend_parts_bwd(params, t, &d_out.gather(t.batch, ids), &mut grads.o)?;
        let dx = params.q.backward(&queries.gather(t.batch, ids), &dq, &mut grads.q);
        dq_map.scatter_add(t.batch, ids, &dx);
        let part = t.parts.first().ok_or_else(|| Error::Invariant("bottom-up trace without keys".into()))?;
        let (dk, dv) = &parts[0];
        let fine_ids = layout.window_tokens(scale - 1, part.window);
        let x = context.gather(t.batch, fine_ids);
        let dxk = params.k.backward(&x, dk, &mut grads.k);
        let dxv = params.v.backward(&x, dv, &mut grads.v);
        dc_map.scatter_add(t.batch, fine_ids, &dxk);
        dc_map.scatter_add(t.batch, fine_ids, &dxv);
    }
    Ok((dq_map, dc_map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_key_returns_value() {
        let p = MhaParams::identity(4, 2).unwrap();
        let q = Matrix::from_rows(&[vec![0.3, -1.0, 2.0, 0.5]]).unwrap();
        let kv = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        assert_eq!(mha(&p, &q, &kv, &kv).unwrap(), kv);
    }

    #[test]
    fn two_token_hand_computation() {
        // h = 1, C = 2, identity projections.
        // q = [1, 0]; keys [1, 0] and [0, 1]; scores / sqrt(2) = [1/sqrt2, 0].
        let p = MhaParams::identity(2, 1).unwrap();
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let (p0, p1) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let out = mha(&p, &q, &k, &v).unwrap();
        assert!((out.get(0, 0) - 2.0 * p0).abs() < 1e-15);
        assert!((out.get(0, 1) - 4.0 * p1).abs() < 1e-15);
    }

    #[test]
    fn key_permutation_invariance() {
        let mut r = rng(2);
        let p = MhaParams::new(8, 2, &mut r).unwrap();
        let q = Matrix::random_normal(3, 8, 1.0, &mut r);
        let k = Matrix::random_normal(5, 8, 1.0, &mut r);
        let v = Matrix::random_normal(5, 8, 1.0, &mut r);
        let perm = [3, 0, 4, 1, 2];
        let pk = Matrix::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let pv = Matrix::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = mha(&p, &q, &k, &v).unwrap();
        let b = mha(&p, &q, &pk, &pv).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn mha_rejects_bad_shapes() {
        let p = MhaParams::identity(4, 2).unwrap();
        let a = Matrix::zeros(2, 4);
        assert!(mha(&p, &a, &Matrix::zeros(2, 3), &a).is_err());
        assert!(mha(&p, &a, &a, &Matrix::zeros(3, 4)).is_err());
        assert!(MhaParams::identity(6, 4).is_err());
    }

    #[test]
    fn whole_grid_window_equals_global_attention() {
        let mut r = rng(3);
        let layout = LayoutSpec::build(4, 4, 2).unwrap();
        let p = MhaParams::new(4, 1, &mut r).unwrap();
        let x = TensorMap::random_normal([1, 4, 4, 4], 1.0, &mut r);
        let all = x.to_matrix();
        let global = mha(&p, &all, &all, &all).unwrap();
        assert_eq!(window_self_attention(&p, &x, &layout, 0).unwrap().as_slice(), global.as_slice());
    }

    #[test]
    fn constant_windows_give_constant_outputs() {
        let mut r = rng(4);
        let layout = LayoutSpec::build(8, 4, 2).unwrap();
        let p = MhaParams::new(4, 2, &mut r).unwrap();
        let x = TensorMap::from_fn([1, 8, 8, 4], |_, y, x, c| ((y / 4) * 2 + x / 4) as f64 + 0.1 * c as f64);
        let out = window_self_attention(&p, &x, &layout, 0).unwrap();
        for w in 0..4 {
            let ids = layout.window_tokens(0, w);
            let first = out.gather(0, &ids[..1]);
            for &t in ids {
                for (a, b) in out.gather(0, &[t]).as_slice().iter().zip(first.as_slice()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn window_attention_matches_naive_loop() {
        let mut r = rng(5);
        let layout = LayoutSpec::build(8, 4, 2).unwrap();
        let p = MhaParams::new(8, 2, &mut r).unwrap();
        let x = TensorMap::random_normal([2, 8, 8, 8], 1.0, &mut r);
        let out = window_self_attention(&p, &x, &layout, 0).unwrap();
        for b in 0..2 {
            for wy in 0..2 {
                for wx in 0..2 {
                    let mut rows = Vec::new();
                    for y in wy * 4..wy * 4 + 4 {
                        for xx in wx * 4..wx * 4 + 4 {
                            rows.push(x.token(b, y, xx).to_vec());
                        }
                    }
                    let t = Matrix::from_rows(&rows).unwrap();
                    let o = mha(&p, &t, &t, &t).unwrap();
                    let mut i = 0;
                    for y in wy * 4..wy * 4 + 4 {
                        for xx in wx * 4..wx * 4 + 4 {
                            assert_eq!(out.token(b, y, xx), o.row(i));
                            i += 1;
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn top_down_at_coarsest_scale_is_window_self_attention() {
        let mut r = rng(6);
        let layout = LayoutSpec::build(16, 4, 2).unwrap();
        let top = layout.levels() - 1;
        let p = MhaParams::new(8, 2, &mut r).unwrap();
        let side = layout.grid_side(top);
        let x = TensorMap::random_normal([2, side, side, 8], 1.0, &mut r);
        let mut ops = OpCounter::new();
        let (td, _) =
            top_down_attention(&layout, top, &[ScaleSource { params: &p, features: &x }], None, &mut ops, false).unwrap();
        assert_eq!(td, window_self_attention(&p, &x, &layout, top).unwrap());
    }

    #[test]
    fn key_counts_per_query() {
        let mut r = rng(7);
        let layout = LayoutSpec::build(16, 4, 2).unwrap(); // 16, 8, 4
        let ps: Vec<MhaParams> = (0..3).map(|_| MhaParams::new(4, 1, &mut r).unwrap()).collect();
        let xs: Vec<TensorMap> =
            (0..3).map(|l| TensorMap::random_normal([1, layout.grid_side(l), layout.grid_side(l), 4], 1.0, &mut r)).collect();
        for l in 0..3 {
            let sources: Vec<ScaleSource> =
                (l..3).map(|m| ScaleSource { params: &ps[m], features: &xs[m] }).collect();
            let mut ops = OpCounter::new();
            top_down_attention(&layout, l, &sources, None, &mut ops, false).unwrap();
            let k = 16 * (3 - l) as u64;
            assert_eq!(ops.attention_pairs(), layout.tokens(l) as u64 * k);
        }
        let mut ops = OpCounter::new();
        bottom_up_attention(&layout, 1, &ps[1], &xs[1], &xs[0], None, &mut ops, false).unwrap();
        assert_eq!(ops.attention_pairs(), layout.tokens(1) as u64 * 16);
    }

    #[test]
    fn bottom_up_with_constant_context_reads_value_of_constant() {
        let mut r = rng(8);
        let layout = LayoutSpec::build(8, 4, 2).unwrap();
        let p = MhaParams::new(4, 2, &mut r).unwrap();
        let fine = TensorMap::from_fn([1, 8, 8, 4], |_, _, _, c| 0.5 - c as f64);
        let coarse = TensorMap::random_normal([1, 4, 4, 4], 1.0, &mut r);
        let mut ops = OpCounter::new();
        let (out, _) = bottom_up_attention(&layout, 1, &p, &coarse, &fine, None, &mut ops, false).unwrap();
        let v = p.v.forward(&fine.gather(0, &[0]));
        let expected = p.o.forward(&v);
        for t in 0..16 {
            for (a, b) in out.gather(0, &[t]).as_slice().iter().zip(expected.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng(9);
        let layout = LayoutSpec::build(8, 4, 2).unwrap();
        let p = MhaParams::new(4, 2, &mut r).unwrap();
        let x = TensorMap::random_normal([1, 8, 8, 4], 1.0, &mut r);
        let (_, ctx) = window_self_attention_forward(&p, &x, &layout, 0).unwrap();
        let mut g = p.zeros_like();
        let dx = window_self_attention_backward(&p, &ctx, &layout, &TensorMap::zeros(x.shape()), &mut g).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }
}
