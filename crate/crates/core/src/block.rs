//! The multi-scale attention block: summarization, a coarse-to-fine
//! top-down pass and a fine-to-coarse bottom-up pass over the active scales.
//!
//! Every attention is a pre-norm residual sublayer; each scale's top-down
//! sublayer is followed by a pre-norm residual feed-forward sublayer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{
    bottom_up_attention, bottom_up_attention_backward, top_down_attention, top_down_attention_backward,
    AttentionTrace, MhaParams, ScaleSource,
};
use crate::cache::{InvalidationSite, QkvCache};
use crate::counter::OpCounter;
use crate::error::{config_err, usage_err, Error, Result};
use crate::layout::{GraphPathways, LayoutSpec};
use crate::params::{join, ParamSet};
use crate::summarize::{accumulate_summaries, summarize_bwd, PoolContext, PoolKind};
use crate::tensor::{gelu, gelu_bwd, layer_norm, layer_norm_bwd, LinearWeights, LnContext, Matrix, NormParams, TensorMap};

/// Which communication pathways a block runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommunicationMode {
    /// Process every scale from the block's first scale to the coarsest.
    /// When off only the first scale is processed.
    pub multi_scale: bool,
    pub summarize: bool,
    /// Windows also read their ancestor windows at coarser scales.
    pub top_down: bool,
    pub bottom_up: bool,
    pub pool: PoolKind,
}

impl CommunicationMode {
    pub const MSA: Self = Self::multi(true, true);
    pub const TOP_DOWN_ONLY: Self = Self::multi(true, false);
    pub const BOTTOM_UP_ONLY: Self = Self::multi(false, true);
    /// All scales with summarization but local window attention only.
    pub const NO_COMMUNICATION: Self = Self::multi(false, false);
    pub const WINDOW_ONLY: Self =
        Self { multi_scale: false, summarize: false, top_down: false, bottom_up: false, pool: PoolKind::Max };

    const fn multi(top_down: bool, bottom_up: bool) -> Self {
        Self { multi_scale: true, summarize: true, top_down, bottom_up, pool: PoolKind::Max }
    }

    pub const ALL: [Self; 5] =
        [Self::MSA, Self::TOP_DOWN_ONLY, Self::BOTTOM_UP_ONLY, Self::NO_COMMUNICATION, Self::WINDOW_ONLY];

    pub fn validate(&self) -> Result<()> {
        if !self.multi_scale && (self.summarize || self.top_down || self.bottom_up) {
            return Err(config_err!("mode: summarize/top-down/bottom-up need multi_scale"));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match (self.multi_scale, self.top_down, self.bottom_up) {
            (false, ..) => "window",
            (true, true, true) => "msa",
            (true, true, false) => "topdown",
            (true, false, true) => "bottomup",
            (true, false, false) => "none",
        }
    }

    pub fn pathways(&self) -> GraphPathways {
        GraphPathways {
            multi_scale: self.multi_scale,
            summarize: self.summarize,
            top_down: self.top_down,
            bottom_up: self.bottom_up,
        }
    }

    /// Last scale this block updates when its first active scale is `first`.
    pub fn top_scale(&self, layout: &LayoutSpec, first: usize) -> usize {
        if self.multi_scale {
            layout.levels() - 1
        } else {
            first
        }
    }
}

impl Default for CommunicationMode {
    fn default() -> Self {
        Self::MSA
    }
}

impl fmt::Display for CommunicationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())?;
        if self.pool == PoolKind::Mean {
            f.write_str("+meanpool")?;
        }
        Ok(())
    }
}

impl FromStr for CommunicationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, pool) = match s.strip_suffix("+meanpool") {
            Some(b) => (b, PoolKind::Mean),
            None => (s, PoolKind::Max),
        };
        let mut mode = match base {
            "msa" => Self::MSA,
            "topdown" => Self::TOP_DOWN_ONLY,
            "bottomup" => Self::BOTTOM_UP_ONLY,
            "none" => Self::NO_COMMUNICATION,
            "window" => Self::WINDOW_ONLY,
            other => return Err(config_err!("unknown mode '{other}' (msa|topdown|bottomup|window|none)")),
        };
        mode.pool = pool;
        mode.validate()?;
        Ok(mode)
    }
}

/// Feature maps of every scale plus the first scale blocks may update.
/// Scales below `first` are kept (frozen) so gradients can still reach them.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleState {
    maps: Vec<TensorMap>,
    first: usize,
}

impl MultiScaleState {
    pub fn new(layout: &LayoutSpec, maps: Vec<TensorMap>, first: usize) -> Result<Self> {
        if maps.len() != layout.levels() {
            return Err(usage_err!("state has {} scales, layout has {}", maps.len(), layout.levels()));
        }
        if first >= maps.len() {
            return Err(usage_err!("first active scale {first} out of range"));
        }
        let [b, _, _, c] = maps[0].shape();
        for (l, m) in maps.iter().enumerate() {
            let side = layout.grid_side(l);
            if m.shape() != [b, side, side, c] {
                return Err(usage_err!("scale {l} has shape {:?}, expected {:?}", m.shape(), [b, side, side, c]));
            }
        }
        Ok(Self { maps, first })
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn set_first(&mut self, first: usize) -> Result<()> {
        if first >= self.maps.len() {
            return Err(usage_err!("first active scale {first} out of range"));
        }
        self.first = first;
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.maps.len()
    }

    pub fn scale(&self, l: usize) -> &TensorMap {
        &self.maps[l]
    }

    pub fn scale_mut(&mut self, l: usize) -> &mut TensorMap {
        &mut self.maps[l]
    }

    pub fn maps(&self) -> &[TensorMap] {
        &self.maps
    }

    pub fn into_maps(self) -> Vec<TensorMap> {
        self.maps
    }

    pub fn channels(&self) -> usize {
        self.maps[0].channels()
    }

    pub fn batch(&self) -> usize {
        self.maps[0].batch()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottomUpParams {
    pub norm_q: NormParams,
    pub norm_kv: NormParams,
    pub mha: MhaParams,
}

impl ParamSet for BottomUpParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.norm_q.visit(&join(prefix, "norm_q"), f);
        self.norm_kv.visit(&join(prefix, "norm_kv"), f);
        self.mha.visit(&join(prefix, "attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.norm_q.visit_mut(&join(prefix, "norm_q"), f);
        self.norm_kv.visit_mut(&join(prefix, "norm_kv"), f);
        self.mha.visit_mut(&join(prefix, "attn"), f);
    }
}

/// Parameters a block owns for one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams {
    /// Norm and projections of the local/top-down attention. Finer scales
    /// reading this scale's keys and values reuse `td_norm` and `td.k`/`td.v`.
    pub td_norm: NormParams,
    pub td: MhaParams,
    pub ffn_norm: NormParams,
    pub ffn_in: LinearWeights,
    pub ffn_out: LinearWeights,
    /// Absent at the block's first scale, which has no finer scale to read.
    pub bu: Option<BottomUpParams>,
}

impl ScaleParams {
    pub fn new<R: Rng + ?Sized>(channels: usize, heads: usize, with_bu: bool, rng: &mut R) -> Result<Self> {
        let td = MhaParams::new(channels, heads, rng)?;
        let ffn_in = LinearWeights::random(channels, 4 * channels, rng);
        let ffn_out = LinearWeights::random(4 * channels, channels, rng);
        let bu = if with_bu {
            Some(BottomUpParams {
                norm_q: NormParams::new(channels),
                norm_kv: NormParams::new(channels),
                mha: MhaParams::new(channels, heads, rng)?,
            })
        } else {
            None
        };
        Ok(Self { td_norm: NormParams::new(channels), td, ffn_norm: NormParams::new(channels), ffn_in, ffn_out, bu })
    }
}

impl ParamSet for ScaleParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.td_norm.visit(&join(prefix, "td_norm"), f);
        self.td.visit(&join(prefix, "td"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
        if let Some(bu) = &self.bu {
            bu.visit(&join(prefix, "bu"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.td_norm.visit_mut(&join(prefix, "td_norm"), f);
        self.td.visit_mut(&join(prefix, "td"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
        if let Some(bu) = &mut self.bu {
            bu.visit_mut(&join(prefix, "bu"), f);
        }
    }
}

/// Learnables of one block, for scales `first..levels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MsaBlockParams {
    pub first: usize,
    pub scales: Vec<ScaleParams>,
}

impl MsaBlockParams {
    pub fn new<R: Rng + ?Sized>(
        layout: &LayoutSpec,
        first: usize,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if first >= layout.levels() {
            return Err(config_err!("block first scale {first} beyond {} scales", layout.levels()));
        }
        let scales = (first..layout.levels())
            .map(|l| ScaleParams::new(channels, heads, l > first, rng))
            .collect::<Result<_>>()?;
        Ok(Self { first, scales })
    }

    pub fn scale(&self, l: usize) -> &ScaleParams {
        &self.scales[l - self.first]
    }

    pub fn channels(&self) -> usize {
        self.scales[0].td.channels()
    }

    /// Randomize every norm's gain and bias around their defaults. Useful
    /// for gradient checks, where identity norms hide mistakes.
    pub fn perturb_norms<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        for s in &mut self.scales {
            let mut norms = vec![&mut s.td_norm, &mut s.ffn_norm];
            if let Some(bu) = &mut s.bu {
                norms.push(&mut bu.norm_q);
                norms.push(&mut bu.norm_kv);
            }
            for n in norms {
                for g in &mut n.gain {
                    *g += rng.sample(normal);
                }
                for b in &mut n.bias {
                    *b += rng.sample(normal);
                }
            }
        }
    }
}

impl ParamSet for MsaBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, s) in self.scales.iter().enumerate() {
            s.visit(&join(prefix, &format!("scale{}", self.first + i)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let first = self.first;
        for (i, s) in self.scales.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("scale{}", first + i)), f);
        }
    }
}

#[derive(Clone, Debug)]
struct TopDownStep {
    normed: TensorMap,
    ln: LnContext,
    trace: AttentionTrace,
    ffn_ln: LnContext,
    ffn_x: Matrix,
    ffn_h: Matrix,
    ffn_a: Matrix,
    /// Norm of the updated scale, read as keys/values by finer scales.
    normed_out: Option<(TensorMap, LnContext)>,
}

#[derive(Clone, Debug)]
struct BottomUpStep {
    q_normed: TensorMap,
    q_ln: LnContext,
    kv_normed: TensorMap,
    kv_ln: LnContext,
    trace: AttentionTrace,
}

/// Everything [`msa_block_backward`] needs from a forward.
#[derive(Clone, Debug)]
pub struct BlockContext {
    first: usize,
    top: usize,
    mode: CommunicationMode,
    shapes: Vec<[usize; 4]>,
    pools: Vec<PoolContext>,
    /// Indexed by `scale - first`.
    td: Vec<TopDownStep>,
    /// Indexed by `scale - first - 1`.
    bu: Vec<BottomUpStep>,
}

fn check_block(params: &MsaBlockParams, layout: &LayoutSpec, state: &MultiScaleState, mode: &CommunicationMode) -> Result<()> {
    mode.validate()?;
    if state.levels() != layout.levels() {
        return Err(usage_err!("state has {} scales, layout has {}", state.levels(), layout.levels()));
    }
    if params.first != state.first() {
        return Err(usage_err!("block parameters start at scale {}, state at {}", params.first, state.first()));
    }
    if params.first + params.scales.len() != layout.levels() {
        return Err(usage_err!("block parameters cover {} scales from {}", params.scales.len(), params.first));
    }
    if params.channels() != state.channels() {
        return Err(usage_err!("block has {} channels, state {}", params.channels(), state.channels()));
    }
    Ok(())
}

fn invalidate(cache: &mut Option<&mut QkvCache>, scale: usize, site: InvalidationSite) {
    if let Some(c) = cache.as_deref_mut() {
        c.invalidate(scale, site);
    }
}

fn run_block(
    params: &MsaBlockParams,
    layout: &LayoutSpec,
    state: &mut MultiScaleState,
    mode: CommunicationMode,
    mut cache: Option<&mut QkvCache>,
    counter: &mut OpCounter,
    record: bool,
) -> Result<Option<BlockContext>> {
    check_block(params, layout, state, &mode)?;
    let first = state.first();
    let top = mode.top_scale(layout, first);
    let levels = layout.levels();
    let c = state.channels();
    if let Some(cache) = cache.as_deref_mut() {
        cache.reset(levels);
    }
    let shapes: Vec<[usize; 4]> = state.maps.iter().map(|m| m.shape()).collect();

    let pools = if mode.summarize && top > first {
        accumulate_summaries(&mut state.maps[first..=top], layout.stride(), mode.pool)?
    } else {
        Vec::new()
    };

    let mut normed_out: Vec<Option<TensorMap>> = vec![None; levels];
    let mut td_steps: Vec<Option<TopDownStep>> = vec![None; top - first + 1];
    for l in (first..=top).rev() {
        let sp = params.scale(l);
        let (normed, ln) = layer_norm(&state.maps[l], &sp.td_norm);
        let mut sources = vec![ScaleSource { params: &sp.td, features: &normed }];
        if mode.top_down {
            for m in l + 1..=top {
                let features = normed_out[m].as_ref().ok_or_else(|| Error::Invariant(format!("scale {m} not normed")))?;
                sources.push(ScaleSource { params: &params.scale(m).td, features });
            }
        }
        let (att, trace) = top_down_attention(layout, l, &sources, cache.as_deref_mut(), counter, record)?;
        state.maps[l].add_assign(&att);

        let (ffn_n, ffn_ln) = layer_norm(&state.maps[l], &sp.ffn_norm);
        let ffn_x = ffn_n.to_matrix();
        let ffn_h = sp.ffn_in.forward(&ffn_x);
        let ffn_a = gelu(&ffn_h);
        let ffn_o = sp.ffn_out.forward(&ffn_a);
        counter.record_linear(ffn_x.rows(), c, 4 * c);
        counter.record_linear(ffn_x.rows(), 4 * c, c);
        state.maps[l].add_assign(&TensorMap::from_matrix(shapes[l], ffn_o)?);

        let site = if l == top { InvalidationSite::CoarsestSelfAttention } else { InvalidationSite::TopDownCrossAttention };
        invalidate(&mut cache, l, site);

        let mut out_ctx = None;
        if mode.top_down && l > first {
            let (n, ctx) = layer_norm(&state.maps[l], &sp.td_norm);
            if record {
                out_ctx = Some((n.clone(), ctx));
            }
            normed_out[l] = Some(n);
        }
        if let Some(trace) = trace {
            td_steps[l - first] = Some(TopDownStep {
                normed,
                ln,
                trace,
                ffn_ln,
                ffn_x,
                ffn_h,
                ffn_a,
                normed_out: out_ctx,
            });
        }
    }

    let mut bu_steps = Vec::new();
    if mode.bottom_up {
        for l in first + 1..=top {
            let bp = params.scale(l).bu.as_ref().ok_or_else(|| Error::Invariant(format!("scale {l} lacks bottom-up parameters")))?;
            let (q_normed, q_ln) = layer_norm(&state.maps[l], &bp.norm_q);
            let (kv_normed, kv_ln) = layer_norm(&state.maps[l - 1], &bp.norm_kv);
            let (att, trace) =
                bottom_up_attention(layout, l, &bp.mha, &q_normed, &kv_normed, cache.as_deref_mut(), counter, record)?;
            state.maps[l].add_assign(&att);
            invalidate(&mut cache, l, InvalidationSite::BottomUpCrossAttention);
            if let Some(trace) = trace {
                bu_steps.push(BottomUpStep { q_normed, q_ln, kv_normed, kv_ln, trace });
            }
        }
    }

    if !record {
        return Ok(None);
    }
    let td = td_steps.into_iter().map(|s| s.ok_or_else(|| Error::Invariant("missing top-down step".into()))).collect::<Result<_>>()?;
    Ok(Some(BlockContext { first, top, mode, shapes, pools, td, bu: bu_steps }))
}

/// Run one block in place on `state`, starting at `state.first()`.
pub fn msa_block_forward(
    params: &MsaBlockParams,
    layout: &LayoutSpec,
    state: &mut MultiScaleState,
    mode: CommunicationMode,
    cache: Option<&mut QkvCache>,
    counter: &mut OpCounter,
) -> Result<()> {
    run_block(params, layout, state, mode, cache, counter, false).map(|_| ())
}

/// [`msa_block_forward`] that also keeps what the backward needs.
pub fn msa_block_forward_train(
    params: &MsaBlockParams,
    layout: &LayoutSpec,
    state: &mut MultiScaleState,
    mode: CommunicationMode,
    cache: Option<&mut QkvCache>,
    counter: &mut OpCounter,
) -> Result<BlockContext> {
    run_block(params, layout, state, mode, cache, counter, true)?
        .ok_or_else(|| Error::Invariant("training forward produced no context".into()))
}

/// Reverse of [`msa_block_forward_train`]. `upstream[l]` is the gradient
/// with respect to scale `l` of the block output; the result is the gradient
/// with respect to the block input. Parameter gradients are added to `grads`.
pub fn msa_block_backward(
    params: &MsaBlockParams,
    layout: &LayoutSpec,
    ctx: &BlockContext,
    upstream: &[TensorMap],
    grads: &mut MsaBlockParams,
) -> Result<Vec<TensorMap>> {
    if upstream.len() != ctx.shapes.len() || upstream.iter().zip(&ctx.shapes).any(|(u, s)| u.shape() != *s) {
        return Err(usage_err!("msa_block_backward: upstream gradients do not match the saved forward"));
    }
    if params.first != ctx.first || grads.first != ctx.first || grads.scales.len() != params.scales.len() {
        return Err(usage_err!("msa_block_backward: parameters do not match the saved forward"));
    }
    let (first, top) = (ctx.first, ctx.top);
    let mut d: Vec<TensorMap> = upstream.to_vec();

    for (i, step) in ctx.bu.iter().enumerate().rev() {
        let l = first + 1 + i;
        let bp = params.scale(l).bu.as_ref().ok_or_else(|| usage_err!("scale {l} lacks bottom-up parameters"))?;
        let gb = grads.scales[l - first].bu.as_mut().ok_or_else(|| usage_err!("gradient set lacks bottom-up at {l}"))?;
        let (dq, dkv) =
            bottom_up_attention_backward(layout, &bp.mha, &step.q_normed, &step.kv_normed, &step.trace, &d[l], &mut gb.mha)?;
        let dxq = layer_norm_bwd(&step.q_ln, &bp.norm_q, &dq, &mut gb.norm_q)?;
        let dxkv = layer_norm_bwd(&step.kv_ln, &bp.norm_kv, &dkv, &mut gb.norm_kv)?;
        d[l].add_assign(&dxq);
        d[l - 1].add_assign(&dxkv);
    }

    let mut d_normed: Vec<Option<TensorMap>> = vec![None; ctx.shapes.len()];
    for l in first..=top {
        let step = &ctx.td[l - first];
        let sp = params.scale(l);
        if let Some((_, out_ln)) = &step.normed_out {
            if let Some(dn) = d_normed[l].take() {
                let g = &mut grads.scales[l - first].td_norm;
                let dx = layer_norm_bwd(out_ln, &sp.td_norm, &dn, g)?;
                d[l].add_assign(&dx);
            }
        }

        let gs = &mut grads.scales[l - first];
        let d_ffn_o = d[l].to_matrix();
        let d_ffn_a = sp.ffn_out.backward(&step.ffn_a, &d_ffn_o, &mut gs.ffn_out);
        let d_ffn_h = gelu_bwd(&step.ffn_h, &d_ffn_a)?;
        let d_ffn_x = sp.ffn_in.backward(&step.ffn_x, &d_ffn_h, &mut gs.ffn_in);
        let d_ffn_x = TensorMap::from_matrix(ctx.shapes[l], d_ffn_x)?;
        let dx = layer_norm_bwd(&step.ffn_ln, &sp.ffn_norm, &d_ffn_x, &mut gs.ffn_norm)?;
        d[l].add_assign(&dx);

        let n_src = if ctx.mode.top_down { top - l + 1 } else { 1 };
        let mut sources = vec![ScaleSource { params: &sp.td, features: &step.normed }];
        for m in l + 1..l + n_src {
            let n = ctx.td[m - first].normed_out.as_ref().ok_or_else(|| Error::Invariant(format!("scale {m} not normed")))?;
            sources.push(ScaleSource { params: &params.scale(m).td, features: &n.0 });
        }
        let mut g_refs: Vec<&mut MhaParams> = grads.scales[l - first..l - first + n_src].iter_mut().map(|s| &mut s.td).collect();
        let d_feats = top_down_attention_backward(layout, &sources, &step.trace, &d[l], &mut g_refs)?;
        let mut d_feats = d_feats.into_iter();
        let d_own = d_feats.next().ok_or_else(|| Error::Invariant("no own-scale gradient".into()))?;
        let dx = layer_norm_bwd(&step.ln, &sp.td_norm, &d_own, &mut grads.scales[l - first].td_norm)?;
        d[l].add_assign(&dx);
        for (i, df) in d_feats.enumerate() {
            let m = l + 1 + i;
            match &mut d_normed[m] {
                Some(acc) => acc.add_assign(&df),
                slot => *slot = Some(df),
            }
        }
    }

    for (i, pool) in ctx.pools.iter().enumerate().rev() {
        let l = first + 1 + i;
        let dx = summarize_bwd(&d[l], pool)?;
        d[l - 1].add_assign(&dx);
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(grid: usize, k: usize, c: usize, seed: u64) -> (LayoutSpec, MsaBlockParams, MultiScaleState) {
        let layout = LayoutSpec::build(grid, k, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MsaBlockParams::new(&layout, 0, c, 2, &mut rng).unwrap();
        let maps = (0..layout.levels())
            .map(|l| TensorMap::random_normal([1, layout.grid_side(l), layout.grid_side(l), c], 1.0, &mut rng))
            .collect();
        let state = MultiScaleState::new(&layout, maps, 0).unwrap();
        (layout, params, state)
    }

    #[test]
    fn mode_names_round_trip() {
        for m in CommunicationMode::ALL {
            assert_eq!(m.to_string().parse::<CommunicationMode>().unwrap(), m);
        }
        let mean: CommunicationMode = "msa+meanpool".parse().unwrap();
        assert_eq!(mean.pool, PoolKind::Mean);
        assert!("global".parse::<CommunicationMode>().unwrap_err().is_config());
    }

    #[test]
    fn cached_and_uncached_forwards_agree() {
        let (layout, params, state) = setup(16, 4, 4, 1);
        let mut a = state.clone();
        let mut b = state;
        let mut cache = QkvCache::new(layout.levels());
        let (mut ca, mut cb) = (OpCounter::new(), OpCounter::new());
        msa_block_forward(&params, &layout, &mut a, CommunicationMode::MSA, None, &mut ca).unwrap();
        msa_block_forward(&params, &layout, &mut b, CommunicationMode::MSA, Some(&mut cache), &mut cb).unwrap();
        assert_eq!(a, b);
        assert!(cb.projection_calls() < ca.projection_calls());
        assert_eq!(ca.attention_pairs(), cb.attention_pairs());
    }

    #[test]
    fn training_forward_matches_plain_forward() {
        let (layout, params, state) = setup(8, 4, 4, 2);
        let mut a = state.clone();
        let mut b = state;
        msa_block_forward(&params, &layout, &mut a, CommunicationMode::MSA, None, &mut OpCounter::new()).unwrap();
        msa_block_forward_train(&params, &layout, &mut b, CommunicationMode::MSA, None, &mut OpCounter::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalidation_sites_follow_the_schedule() {
        let (layout, params, mut state) = setup(16, 4, 4, 3);
        let mut cache = QkvCache::new(layout.levels());
        msa_block_forward(&params, &layout, &mut state, CommunicationMode::MSA, Some(&mut cache), &mut OpCounter::new())
            .unwrap();
        let got: Vec<(usize, InvalidationSite)> = cache.events().iter().map(|e| (e.scale, e.site)).collect();
        use InvalidationSite::*;
        assert_eq!(
            got,
            vec![
                (2, CoarsestSelfAttention),
                (1, TopDownCrossAttention),
                (0, TopDownCrossAttention),
                (1, BottomUpCrossAttention),
                (2, BottomUpCrossAttention),
            ]
        );
    }

    #[test]
    fn window_mode_leaves_coarse_scales_alone() {
        let (layout, params, state) = setup(8, 4, 4, 4);
        let mut s = state.clone();
        msa_block_forward(&params, &layout, &mut s, CommunicationMode::WINDOW_ONLY, None, &mut OpCounter::new()).unwrap();
        assert_ne!(s.scale(0), state.scale(0));
        assert_eq!(s.scale(1), state.scale(1));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (layout, params, mut state) = setup(8, 4, 4, 5);
        let ctx = msa_block_forward_train(&params, &layout, &mut state, CommunicationMode::MSA, None, &mut OpCounter::new())
            .unwrap();
        let up: Vec<TensorMap> = state.maps().iter().map(|m| TensorMap::zeros(m.shape())).collect();
        let mut g = params.zeros_like();
        let d = msa_block_backward(&params, &layout, &ctx, &up, &mut g).unwrap();
        assert!(d.iter().all(|m| m.max_abs() == 0.0));
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn rejects_mismatched_state() {
        let (layout, params, mut state) = setup(8, 4, 4, 6);
        state.set_first(1).unwrap();
        assert!(msa_block_forward(&params, &layout, &mut state, CommunicationMode::MSA, None, &mut OpCounter::new()).is_err());
    }
}
