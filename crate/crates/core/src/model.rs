//! The Atlas classifier: patch embedding, multi-scale initialization, staged
//! blocks with scale dropping, and a pooled linear readout. Also the loss,
//! the optimizer and one training step.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{msa_block_backward, msa_block_forward, msa_block_forward_train, BlockContext, CommunicationMode, MsaBlockParams, MultiScaleState};
use crate::cache::QkvCache;
use crate::counter::OpCounter;
use crate::error::{config_err, usage_err, Error, Result};
use crate::layout::LayoutSpec;
use crate::params::{join, ParamSet};
use crate::summarize::{summarize_bwd, summarize_with, PoolContext};
use crate::tensor::{layer_norm_rows, layer_norm_rows_bwd, softmax_in_place, LinearWeights, LnContext, Matrix, NormParams, TensorMap};

/// How blocks are distributed over scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Composition {
    /// Stage `s` runs `depths[s]` blocks over scales `s..L`, then drops scale `s`.
    Atlas,
    /// All `sum(depths)` blocks run over every scale.
    Stack,
}

/// How the classifier reduces the final state to one vector per image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Token mean of the coarsest scale.
    LastScale,
    /// Average of the per-scale token means.
    AverageScales,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasConfig {
    pub image_side: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub window: usize,
    pub stride: usize,
    pub channels: usize,
    pub heads: usize,
    pub depths: Vec<usize>,
    pub classes: usize,
    pub mode: CommunicationMode,
    pub composition: Composition,
    pub readout: Readout,
    pub seed: u64,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            image_side: 128,
            patch: 8,
            in_channels: 3,
            window: 8,
            stride: 2,
            channels: 32,
            heads: 4,
            depths: vec![1, 1],
            classes: 10,
            mode: CommunicationMode::MSA,
            composition: Composition::Atlas,
            readout: Readout::LastScale,
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: [&str; 13] = [
    "image_side",
    "patch",
    "in_channels",
    "window",
    "stride",
    "channels",
    "heads",
    "depths",
    "classes",
    "mode",
    "composition",
    "readout",
    "seed",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| config_err!("{key}: cannot parse '{value}'"))
}

impl AtlasConfig {
    /// Layout of the token grid after patch embedding.
    pub fn layout(&self) -> Result<LayoutSpec> {
        if self.patch == 0 || self.image_side == 0 || self.image_side % self.patch != 0 {
            return Err(config_err!("image_side {} is not divisible by patch {}", self.image_side, self.patch));
        }
        LayoutSpec::build(self.image_side / self.patch, self.window, self.stride)
    }

    pub fn validate(&self) -> Result<LayoutSpec> {
        let layout = self.layout()?;
        self.mode.validate()?;
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(config_err!("channels {} must be a positive multiple of heads {}", self.channels, self.heads));
        }
        if self.in_channels == 0 || self.classes == 0 {
            return Err(config_err!("in_channels and classes must be positive"));
        }
        if self.depths.len() != layout.levels() {
            return Err(config_err!(
                "depths has {} entries but the layout has {} scales",
                self.depths.len(),
                layout.levels()
            ));
        }
        match self.composition {
            Composition::Atlas if self.depths.last() == Some(&0) => {
                return Err(config_err!("depths: the last stage needs at least one block"))
            }
            Composition::Stack if self.depths.iter().sum::<usize>() == 0 => {
                return Err(config_err!("depths: at least one block is required"))
            }
            _ => {}
        }
        Ok(layout)
    }

    /// First active scale of every block, in execution order.
    pub fn block_schedule(&self) -> Vec<usize> {
        match self.composition {
            Composition::Atlas => {
                self.depths.iter().enumerate().flat_map(|(s, &d)| std::iter::repeat_n(s, d)).collect()
            }
            Composition::Stack => vec![0; self.depths.iter().sum()],
        }
    }

    /// Scales averaged by the readout.
    pub fn readout_scales(&self, levels: usize) -> Vec<usize> {
        if !self.mode.multi_scale {
            return vec![0];
        }
        match self.readout {
            Readout::LastScale => vec![levels - 1],
            Readout::AverageScales => (0..levels).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_side" => self.image_side = parse_num(key, value)?,
            "patch" => self.patch = parse_num(key, value)?,
            "in_channels" => self.in_channels = parse_num(key, value)?,
            "window" => self.window = parse_num(key, value)?,
            "stride" => self.stride = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "classes" => self.classes = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "depths" => {
                self.depths = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "mode" => self.mode = value.trim().parse()?,
            "composition" => {
                self.composition = match value.trim() {
                    "atlas" => Composition::Atlas,
                    "stack" => Composition::Stack,
                    v => return Err(config_err!("composition: unknown value '{v}' (atlas|stack)")),
                }
            }
            "readout" => {
                self.readout = match value.trim() {
                    "last" => Readout::LastScale,
                    "average" => Readout::AverageScales,
                    v => return Err(config_err!("readout: unknown value '{v}' (last|average)")),
                }
            }
            _ => return Err(config_err!("unknown config key '{key}'")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "image_side" => self.image_side.to_string(),
            "patch" => self.patch.to_string(),
            "in_channels" => self.in_channels.to_string(),
            "window" => self.window.to_string(),
            "stride" => self.stride.to_string(),
            "channels" => self.channels.to_string(),
            "heads" => self.heads.to_string(),
            "depths" => self.depths.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
            "classes" => self.classes.to_string(),
            "mode" => self.mode.to_string(),
            "composition" => match self.composition {
                Composition::Atlas => "atlas".into(),
                Composition::Stack => "stack".into(),
            },
            "readout" => match self.readout {
                Readout::LastScale => "last".into(),
                Readout::AverageScales => "average".into(),
            },
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Flat `key=value` text, one key per line; `#` starts a comment.
    /// Keys missing from `text` keep their default.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err!("line {}: expected key=value", n + 1))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Name of the first field that differs from `other`.
    pub fn first_difference(&self, other: &Self) -> Option<&'static str> {
        CONFIG_KEYS.into_iter().find(|k| self.get(k) != other.get(k))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasParams {
    /// Maps one flattened `patch x patch x in_channels` pixel block to a token.
    pub patch_embed: LinearWeights,
    /// Learned absolute position of every finest-scale token.
    pub pos: Matrix,
    pub blocks: Vec<MsaBlockParams>,
    pub final_norm: NormParams,
    pub head: LinearWeights,
}

impl AtlasParams {
    pub fn new<R: Rng + ?Sized>(config: &AtlasConfig, rng: &mut R) -> Result<Self> {
        let layout = config.validate()?;
        let c = config.channels;
        let patch_in = config.patch * config.patch * config.in_channels;
        let patch_embed = LinearWeights::random(patch_in, c, rng);
        let pos = Matrix::random_normal(layout.tokens(0), c, 0.02, rng);
        let blocks = config
            .block_schedule()
            .into_iter()
            .map(|first| MsaBlockParams::new(&layout, first, c, config.heads, rng))
            .collect::<Result<_>>()?;
        let head = LinearWeights::random(c, config.classes, rng);
        Ok(Self { patch_embed, pos, blocks, final_norm: NormParams::new(c), head })
    }

    /// Check that every tensor has the shape `config` calls for.
    pub fn check_against(&self, config: &AtlasConfig) -> Result<()> {
        let reference = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut expected = Vec::new();
        reference.visit("", &mut |n, s, _| expected.push((n.to_string(), s.to_vec())));
        let mut actual = Vec::new();
        self.visit("", &mut |n, s, _| actual.push((n.to_string(), s.to_vec())));
        if expected != actual {
            let bad = expected
                .iter()
                .zip(&actual)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.0.clone())
                .unwrap_or_else(|| "tensor count".into());
            return Err(config_err!("parameters do not match the configuration at '{bad}'"));
        }
        Ok(())
    }
}

impl ParamSet for AtlasParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        self.pos.visit(&join(prefix, "pos"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        self.pos.visit_mut(&join(prefix, "pos"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Rearrange pixels into one row per finest-scale token, each row the
/// `(py, px, channel)`-ordered pixels of its patch.
pub fn patchify(images: &TensorMap, patch: usize) -> Result<Matrix> {
    let [b, h, w, c] = images.shape();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(config_err!("image {h}x{w} is not divisible by patch {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Matrix::zeros(b * gh * gw, patch * patch * c);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = out.row_mut((bi * gh + gy) * gw + gx);
                let mut at = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        row[at..at + c].copy_from_slice(images.token(bi, gy * patch + py, gx * patch + px));
                        at += c;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Saved state of a training forward.
#[derive(Clone, Debug)]
pub struct AtlasContext {
    batch: usize,
    patches: Matrix,
    init_pools: Vec<PoolContext>,
    blocks: Vec<BlockContext>,
    shapes: Vec<[usize; 4]>,
    readout_scales: Vec<usize>,
    readout_ln: LnContext,
    readout_normed: Matrix,
}

#[derive(Clone, Debug)]
pub struct AtlasModel {
    pub config: AtlasConfig,
    pub layout: LayoutSpec,
    pub params: AtlasParams,
}

impl AtlasModel {
    /// Randomly initialized model; weights depend only on `config.seed`.
    pub fn new(config: AtlasConfig) -> Result<Self> {
        let layout = config.validate()?;
        let params = AtlasParams::new(&config, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: AtlasConfig, params: AtlasParams) -> Result<Self> {
        let layout = config.validate()?;
        params.check_against(&config)?;
        Ok(Self { config, layout, params })
    }

    fn check_images(&self, images: &TensorMap) -> Result<()> {
        let cfg = &self.config;
        let [b, h, w, c] = images.shape();
        if b == 0 || h != cfg.image_side || w != cfg.image_side || c != cfg.in_channels {
            return Err(config_err!(
                "images are {b}x{h}x{w}x{c}, model expects Bx{0}x{0}x{1}",
                cfg.image_side,
                cfg.in_channels
            ));
        }
        Ok(())
    }

    /// Patch embedding plus positions, then the pooling cascade that fills
    /// every coarser scale.
    fn embed(&self, images: &TensorMap, counter: &mut OpCounter) -> Result<(Matrix, MultiScaleState, Vec<PoolContext>)> {
        self.check_images(images)?;
        let b = images.batch();
        let patches = patchify(images, self.config.patch)?;
        let mut x = self.params.patch_embed.forward(&patches);
        counter.record_linear(patches.rows(), patches.cols(), self.config.channels);
        let n = self.layout.tokens(0);
        for r in 0..x.rows() {
            let p = self.params.pos.row(r % n);
            for (v, q) in x.row_mut(r).iter_mut().zip(p) {
                *v += q;
            }
        }
        let side = self.layout.grid_side(0);
        let mut maps = vec![TensorMap::from_matrix([b, side, side, self.config.channels], x)?];
        let mut pools = Vec::new();
        for l in 1..self.layout.levels() {
            let (y, ctx) = summarize_with(&maps[l - 1], self.layout.stride(), self.config.mode.pool)?;
            maps.push(y);
            pools.push(ctx);
        }
        Ok((patches, MultiScaleState::new(&self.layout, maps, 0)?, pools))
    }

    fn pool_readout(&self, state: &MultiScaleState, scales: &[usize]) -> Matrix {
        let (b, c) = (state.batch(), state.channels());
        let mut pooled = Matrix::zeros(b, c);
        for bi in 0..b {
            let mut acc = vec![0.0; c];
            for &l in scales {
                let m = state.scale(l);
                let n = (m.height() * m.width()) as f64;
                let mut sum = vec![0.0; c];
                for y in 0..m.height() {
                    for x in 0..m.width() {
                        for (s, v) in sum.iter_mut().zip(m.token(bi, y, x)) {
                            *s += v;
                        }
                    }
                }
                for (a, s) in acc.iter_mut().zip(&sum) {
                    *a += s / n;
                }
            }
            let k = scales.len() as f64;
            for (o, a) in pooled.row_mut(bi).iter_mut().zip(&acc) {
                *o = a / k;
            }
        }
        pooled
    }

    fn head(&self, pooled: &Matrix, counter: &mut OpCounter) -> (Matrix, Matrix, LnContext) {
        let (normed, ln) = layer_norm_rows(pooled, &self.params.final_norm);
        counter.record_linear(normed.rows(), self.config.channels, self.config.classes);
        (self.params.head.forward(&normed), normed, ln)
    }

    /// Logits `B x classes` for a batch of `B x image_side x image_side x in_channels` images.
    pub fn forward(&self, images: &TensorMap, use_cache: bool, counter: &mut OpCounter) -> Result<Matrix> {
        let (_, mut state, _) = self.embed(images, counter)?;
        let mut cache = QkvCache::new(self.layout.levels());
        for (first, block) in self.config.block_schedule().into_iter().zip(&self.params.blocks) {
            state.set_first(first)?;
            let cache = use_cache.then_some(&mut cache);
            msa_block_forward(block, &self.layout, &mut state, self.config.mode, cache, counter)?;
        }
        let scales = self.config.readout_scales(self.layout.levels());
        Ok(self.head(&self.pool_readout(&state, &scales), counter).0)
    }

    /// Final multi-scale state, before readout.
    pub fn features(&self, images: &TensorMap, counter: &mut OpCounter) -> Result<MultiScaleState> {
        let (_, mut state, _) = self.embed(images, counter)?;
        for (first, block) in self.config.block_schedule().into_iter().zip(&self.params.blocks) {
            state.set_first(first)?;
            msa_block_forward(block, &self.layout, &mut state, self.config.mode, None, counter)?;
        }
        Ok(state)
    }

    pub fn forward_train(&self, images: &TensorMap, counter: &mut OpCounter) -> Result<(Matrix, AtlasContext)> {
        let (patches, mut state, init_pools) = self.embed(images, counter)?;
        let shapes = state.maps().iter().map(|m| m.shape()).collect();
        let mut blocks = Vec::with_capacity(self.params.blocks.len());
        for (first, block) in self.config.block_schedule().into_iter().zip(&self.params.blocks) {
            state.set_first(first)?;
            blocks.push(msa_block_forward_train(block, &self.layout, &mut state, self.config.mode, None, counter)?);
        }
        let readout_scales = self.config.readout_scales(self.layout.levels());
        let pooled = self.pool_readout(&state, &readout_scales);
        let (logits, readout_normed, readout_ln) = self.head(&pooled, counter);
        let ctx =
            AtlasContext { batch: images.batch(), patches, init_pools, blocks, shapes, readout_scales, readout_ln, readout_normed };
        Ok((logits, ctx))
    }

    /// Parameter gradients for upstream logit gradient `d_logits`.
    pub fn backward(&self, ctx: &AtlasContext, d_logits: &Matrix) -> Result<AtlasParams> {
        if (d_logits.rows(), d_logits.cols()) != (ctx.batch, self.config.classes) {
            return Err(usage_err!("atlas backward: logit gradient must be {}x{}", ctx.batch, self.config.classes));
        }
        if ctx.blocks.len() != self.params.blocks.len() {
            return Err(usage_err!("atlas backward: context is from a different model"));
        }
        let mut g = self.params.zeros_like();
        let b = ctx.batch;

        let d_normed = self.params.head.backward(&ctx.readout_normed, d_logits, &mut g.head);
        let d_pooled = layer_norm_rows_bwd(&ctx.readout_ln, &self.params.final_norm, &d_normed, &mut g.final_norm)?;

        let mut d: Vec<TensorMap> = ctx.shapes.iter().map(|&s| TensorMap::zeros(s)).collect();
        let k = ctx.readout_scales.len() as f64;
        for &l in &ctx.readout_scales {
            let [_, h, w, _] = ctx.shapes[l];
            let scale = 1.0 / (k * (h * w) as f64);
            let m = &mut d[l];
            for bi in 0..b {
                let dp = d_pooled.row(bi);
                for y in 0..h {
                    for x in 0..w {
                        for (t, v) in m.token_mut(bi, y, x).iter_mut().zip(dp) {
                            *t += v * scale;
                        }
                    }
                }
            }
        }

        for ((bctx, block), gblock) in ctx.blocks.iter().zip(&self.params.blocks).zip(g.blocks.iter_mut()).rev() {
            d = msa_block_backward(block, &self.layout, bctx, &d, gblock)?;
        }
        for (l, pool) in ctx.init_pools.iter().enumerate().rev() {
            let dx = summarize_bwd(&d[l + 1], pool)?;
            d[l].add_assign(&dx);
        }

        let dx = d[0].to_matrix();
        let n = self.layout.tokens(0);
        for r in 0..dx.rows() {
            let gp = g.pos.row_mut(r % n);
            for (p, v) in gp.iter_mut().zip(dx.row(r)) {
                *p += v;
            }
        }
        self.params.patch_embed.backward(&ctx.patches, &dx, &mut g.patch_embed);
        Ok(g)
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() || logits.rows() == 0 {
        return Err(usage_err!("cross_entropy: {} logit rows for {} labels", logits.rows(), labels.len()));
    }
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(usage_err!("cross_entropy: label {y} out of range"));
        }
        let mut p = logits.row(r).to_vec();
        softmax_in_place(&mut p);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        p[y] -= 1.0;
        for (g, v) in grad.row_mut(r).iter_mut().zip(&p) {
            *g = v / n;
        }
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy loss {loss}")));
    }
    Ok((loss, grad))
}

/// Stochastic gradient descent with momentum and L2 weight decay:
/// `v = momentum * v + g + weight_decay * p`, `p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let g = grads.flatten();
        if self.velocity.len() != g.len() {
            self.velocity = vec![0.0; g.len()];
        }
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let vel = &mut self.velocity;
        let mut at = 0;
        params.visit_mut("", &mut |_, _, vals| {
            for p in vals.iter_mut() {
                let v = mu * vel[at] + g[at] + wd * *p;
                vel[at] = v;
                *p -= lr * v;
                at += 1;
            }
        });
    }
}

/// One forward, backward and optimizer update on a batch; returns the loss
/// before the update.
pub fn train_step(model: &mut AtlasModel, sgd: &mut Sgd, images: &TensorMap, labels: &[usize]) -> Result<f64> {
    let (logits, ctx) = model.forward_train(images, &mut OpCounter::new())?;
    let (loss, d_logits) = cross_entropy(&logits, labels)?;
    let grads = model.backward(&ctx, &d_logits)?;
    sgd.step(&mut model.params, &grads);
    Ok(loss)
}
