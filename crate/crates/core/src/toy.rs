//! A synthetic long-range task: two sign markers in different windows, the
//! label is whether their signs differ.
//!
//! No single window sees both markers, so a model without cross-window
//! communication cannot do better than chance on the pair.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::block::CommunicationMode;
use crate::checkpoint::save_checkpoint;
use crate::counter::OpCounter;
use crate::error::{Error, Result};
use crate::model::{train_step, AtlasConfig, AtlasModel, Composition, Readout, Sgd};
use crate::tensor::TensorMap;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub image_side: usize,
    /// Marker side in pixels; markers sit on a grid of this pitch.
    pub marker: usize,
    /// Window side in pixels; the two markers land in different windows.
    pub window_pixels: usize,
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
}

impl ToyTask {
    /// The task matching `config`'s patch and window geometry.
    pub fn for_config(config: &AtlasConfig, train: usize, val: usize, seed: u64) -> Self {
        Self {
            image_side: config.image_side,
            marker: config.patch,
            window_pixels: config.patch * config.window,
            noise: 0.1,
            train,
            val,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.marker > 0
            && self.window_pixels % self.marker == 0
            && self.image_side % self.window_pixels == 0
            && self.image_side / self.window_pixels >= 2;
        if !ok {
            return Err(Error::Config(format!(
                "toy task needs at least 2x2 windows of {} pixels tiling {} pixels, markers of {} pixels dividing a window",
                self.window_pixels, self.image_side, self.marker
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ToyData {
    pub images: TensorMap,
    pub labels: Vec<usize>,
    /// `(window, window)` index pair of each sample's markers.
    pub windows: Vec<(usize, usize)>,
}

impl ToyData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, ids: &[usize]) -> Result<(TensorMap, Vec<usize>)> {
        let [_, h, w, c] = self.images.shape();
        let per = h * w * c;
        let mut data = Vec::with_capacity(ids.len() * per);
        for &i in ids {
            data.extend_from_slice(&self.images.as_slice()[i * per..(i + 1) * per]);
        }
        Ok((TensorMap::new([ids.len(), h, w, c], data)?, ids.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Draw `n` single-channel samples.
pub fn generate(task: &ToyTask, n: usize, rng: &mut ChaCha8Rng) -> Result<ToyData> {
    task.validate()?;
    let side = task.image_side;
    let wpr = side / task.window_pixels;
    let cells = task.window_pixels / task.marker;
    let noise = Normal::new(0.0, task.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    let mut windows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut img: Vec<f64> = (0..side * side).map(|_| noise.sample(rng)).collect();
        let w1 = rng.random_range(0..wpr * wpr);
        let mut w2 = rng.random_range(0..wpr * wpr - 1);
        if w2 >= w1 {
            w2 += 1;
        }
        let mut signs = [0usize; 2];
        for (j, &win) in [w1, w2].iter().enumerate() {
            let bit = rng.random_range(0..2);
            signs[j] = bit;
            let value = if bit == 1 { 1.0 } else { -1.0 };
            let (cy, cx) = (rng.random_range(0..cells), rng.random_range(0..cells));
            let y0 = (win / wpr) * task.window_pixels + cy * task.marker;
            let x0 = (win % wpr) * task.window_pixels + cx * task.marker;
            for y in y0..y0 + task.marker {
                for x in x0..x0 + task.marker {
                    img[y * side + x] = value;
                }
            }
        }
        data.extend(img);
        labels.push(signs[0] ^ signs[1]);
        windows.push((w1, w2));
    }
    Ok(ToyData { images: TensorMap::new([n, side, side, 1], data)?, labels, windows })
}

/// Train and validation sets; validation draws from an independent stream.
pub fn generate_split(task: &ToyTask) -> Result<(ToyData, ToyData)> {
    let train = generate(task, task.train, &mut ChaCha8Rng::seed_from_u64(task.seed))?;
    let val = generate(task, task.val, &mut ChaCha8Rng::seed_from_u64(task.seed ^ 0x5eed_0f_7a1))?;
    Ok((train, val))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Decay the learning rate linearly to zero over the run.
    pub linear_decay: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 8, batch: 16, lr: 0.2, momentum: 0.0, weight_decay: 0.0, linear_decay: true, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

pub const METRICS_HEADER: &str = "mode,seed,epoch,loss,val_accuracy";

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub mode: CommunicationMode,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    pub model: AtlasModel,
}

impl ToyRun {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map(|m| m.val_accuracy).unwrap_or(0.0)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.metrics.iter().map(|m| m.val_accuracy).fold(0.0, f64::max)
    }

    /// Metrics rows without header.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for m in &self.metrics {
            let _ = writeln!(s, "{},{},{},{:.6},{:.4}", self.mode, self.seed, m.epoch, m.loss, m.val_accuracy);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, path)
    }
}

/// Fraction of `data` classified correctly, evaluated in chunks.
pub fn accuracy(model: &AtlasModel, data: &ToyData) -> Result<f64> {
    let mut correct = 0;
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(64) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.forward(&x, true, &mut OpCounter::new())?;
        for (i, &label) in y.iter().enumerate() {
            let row = logits.row(i);
            let pred = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Train a fresh model on `train`, reporting validation accuracy after every
/// epoch. Epoch 0 is the untrained model.
pub fn train_toy(config: &AtlasConfig, train: &ToyData, val: &ToyData, opts: &TrainOptions) -> Result<ToyRun> {
    let mut model = AtlasModel::new(config.clone())?;
    let mut sgd = Sgd::new(opts.lr, opts.momentum, opts.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7a1_5eed);
    let mut metrics = vec![EpochMetrics { epoch: 0, loss: f64::NAN, val_accuracy: accuracy(&model, val)? }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(opts.batch.max(1));
    let total = (opts.epochs * steps_per_epoch).max(1);
    let mut step = 0;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(opts.batch.max(1)) {
            if opts.linear_decay {
                sgd.lr = opts.lr * (1.0 - step as f64 / total as f64);
            }
            let (x, y) = train.batch(chunk)?;
            let loss = train_step(&mut model, &mut sgd, &x, &y)?;
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let loss = loss_sum / train.len().max(1) as f64;
        metrics.push(EpochMetrics { epoch, loss, val_accuracy: accuracy(&model, val)? });
    }
    Ok(ToyRun { mode: config.mode, seed: config.seed, metrics, model })
}

/// The model used for the communication ablation: 8x8 single-channel images,
/// 2x2 patches, a 4x4 token grid split into four 2x2 windows and one 2x2
/// coarse scale.
pub fn toy_config(mode: CommunicationMode, seed: u64) -> AtlasConfig {
    AtlasConfig {
        image_side: 8,
        patch: 2,
        in_channels: 1,
        window: 2,
        stride: 2,
        channels: 16,
        heads: 2,
        depths: vec![1, 1],
        classes: 2,
        mode,
        composition: Composition::Stack,
        readout: Readout::AverageScales,
        seed,
    }
}
