//! Counter fine-tuning with AdamW on `L_C + L_D`, per-epoch logs and the
//! Mann-Kendall trend test used to judge training curves.

use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::counter::layers::Tensor;
use crate::counter::{Checkpoint, Counter, CounterConfig, CounterParams, PreparedInput};
use crate::dataset::CountingRecord;
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::exemplar::{ExemplarPair, PipelineConfig};
use crate::losses::LossReport;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Pixel MSE only.
    #[serde(rename = "ld")]
    DensityOnly,
    /// Pixel MSE plus the contrastive term.
    #[serde(rename = "ld+lc")]
    DensityContrastive,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ld" => Ok(LossMode::DensityOnly),
            "ld+lc" => Ok(LossMode::DensityContrastive),
            _ => Err(Error::Config(format!("unknown loss mode {s:?}; expected ld or ld+lc"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub sigma: f64,
    pub loss: LossMode,
    /// Random color transforms and flips, applied jointly to image,
    /// exemplars and target. Stops a counter trained on few classes from
    /// keying on their colors.
    pub augment: bool,
    /// With `augment`, each epoch presents every training image this many
    /// times under independent augmentation draws.
    pub repeats: usize,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine_decay: bool,
    pub pipeline: PipelineConfig,
    pub counter: CounterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            sigma: 4.0,
            loss: LossMode::DensityContrastive,
            augment: false,
            repeats: 1,
            cosine_decay: false,
            pipeline: PipelineConfig::default(),
            counter: CounterConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings that converge within 20 epochs on the 64x64 synthetic sets
    /// with a from-scratch counter.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 1,
            beta2: 0.99,
            cosine_decay: true,
            augment: true,
            repeats: 3,
            counter: CounterConfig {
                patch: 8,
                decoder_channels: vec![32, 16, 8],
                skip: true,
                density_scale: 100.0,
                output_bias: -2.0,
                ..CounterConfig::default()
            },
            ..Self::default()
        }
    }

    /// Learning rate for optimizer step `step` of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine_decay || total == 0 {
            return self.learning_rate;
        }
        let t = step as f64 / total as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.sigma > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("sigma must be > 0 and betas in [0, 1)".into()));
        }
        self.pipeline.validate()?;
        self.counter.validate()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))[..16].to_string()
}

/// One training or evaluation image, ready for the counter.
#[derive(Debug, Clone)]
pub struct CounterItem {
    pub image_id: String,
    pub input: PreparedInput,
    /// Negative exemplars; `None` when the contrastive term is off.
    pub negatives: Option<Vec<Vec<f64>>>,
    pub gt: DensityMap,
    pub gt_count: f64,
}

impl CounterItem {
    pub fn new(
        counter: &Counter,
        record: &CountingRecord,
        image: &RgbImage,
        pair: &ExemplarPair,
        sigma: f64,
        loss: LossMode,
    ) -> Result<Self> {
        let input = counter.prepare(image, &pair.positive_patches())?;
        let negatives = match loss {
            LossMode::DensityContrastive if !pair.negatives.is_empty() => {
                Some(counter.prepare(image, &pair.negative_patches())?.exemplars)
            }
            _ => None,
        };
        Ok(Self {
            image_id: record.image_id.clone(),
            input,
            negatives,
            gt: record.density(sigma, counter.config.density_scale)?,
            gt_count: record.count() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
    pub val_mae: Option<f64>,
    pub val_rmse: Option<f64>,
    pub seconds: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
}

/// Training-time augmentation: a random color transform around the image's
/// per-channel median (its background for sparse scenes) plus flips, applied
/// jointly to image, exemplars and target.
#[derive(Debug, Clone, Copy)]
struct Augment {
    /// Row-major 3x3 color matrix: a channel permutation with random gains
    /// and cross-talk.
    mix: [f64; 9],
    flip_x: bool,
    flip_y: bool,
}

impl Augment {
    fn draw(rng: &mut impl rand::Rng) -> Self {
        let mut perm = [0, 1, 2];
        perm.shuffle(rng);
        let mut mix = [0.0; 9];
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                mix[r * 3 + c] = if c == src { rng.random_range(0.6..1.4) } else { rng.random_range(-0.3..0.3) };
            }
        }
        Self { mix, flip_x: rng.random(), flip_y: rng.random() }
    }

    fn chw(&self, x: &[f64], h: usize, w: usize, center: &[f64; 3]) -> Vec<f64> {
        let n = h * w;
        let mut mixed = vec![0.0; x.len()];
        for r in 0..3 {
            for i in 0..n {
                mixed[r * n + i] = center[r]
                    + (0..3).map(|c| self.mix[r * 3 + c] * (x[c * n + i] - center[c])).sum::<f64>();
            }
        }
        let mut out = vec![0.0; x.len()];
        for c in 0..3 {
            self.plane(&mixed[c * n..(c + 1) * n], &mut out[c * n..(c + 1) * n], h, w);
        }
        out
    }

    fn plane(&self, src: &[f64], dst: &mut [f64], h: usize, w: usize) {
        for r in 0..h {
            let sr = if self.flip_y { h - 1 - r } else { r };
            for c in 0..w {
                let sc = if self.flip_x { w - 1 - c } else { c };
                dst[r * w + c] = src[sr * w + sc];
            }
        }
    }

    fn apply(&self, item: &CounterItem, side: usize) -> Result<CounterItem> {
        let (h, w) = (item.input.height, item.input.width);
        let n = h * w;
        let mut center = [0.0; 3];
        for (c, m) in center.iter_mut().enumerate() {
            let mut plane = item.input.image[c * n..(c + 1) * n].to_vec();
            plane.sort_by(f64::total_cmp);
            *m = plane[n / 2];
        }
        let exemplars = |v: &[Vec<f64>]| v.iter().map(|e| self.chw(e, side, side, &center)).collect::<Vec<_>>();
        let mut gt = vec![0.0; n];
        self.plane(item.gt.grid(), &mut gt, h, w);
        Ok(CounterItem {
            image_id: item.image_id.clone(),
            input: PreparedInput {
                image: self.chw(&item.input.image, h, w, &center),
                height: h,
                width: w,
                exemplars: exemplars(&item.input.exemplars),
            },
            negatives: item.negatives.as_deref().map(exemplars),
            gt: DensityMap::from_grid(h, w, item.gt.scale(), gt)?,
            gt_count: item.gt_count,
        })
    }
}

struct AdamW {
    m: CounterParams,
    v: CounterParams,
    step: i32,
}

impl AdamW {
    fn new(params: &CounterParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    fn update(&mut self, params: &mut CounterParams, grads: &CounterParams, c: &TrainConfig, lr: f64) {
        self.step += 1;
        if lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in tensors.zip(moments) {
            adamw_tensor(p, g, m, v, c, lr, bc1, bc2);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw_tensor(p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor, c: &TrainConfig, lr: f64, bc1: f64, bc2: f64) {
    for i in 0..p.data.len() {
        let gi = g.data[i];
        m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
        v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
        let update = (m.data[i] / bc1) / ((v.data[i] / bc2).sqrt() + c.eps);
        p.data[i] -= lr * (update + c.weight_decay * p.data[i]);
    }
}

/// Counts predicted from the positive stream only.
pub fn predict_counts(counter: &Counter, items: &[CounterItem]) -> Result<Vec<f64>> {
    items.iter().map(|it| Ok(counter.density(&it.input)?.count())).collect()
}

/// Fine-tune from the config's initialization. Deterministic for a fixed
/// seed; aborts on the first non-finite loss naming the image.
pub fn train_counter(train: &[CounterItem], val: &[CounterItem], config: &TrainConfig) -> Result<TrainOutcome> {
    let counter = Counter::new(config.counter.clone())?;
    train_from(counter, train, val, config, |_| {})
}

/// As [`train_counter`], starting from `counter` and reporting each epoch to
/// `on_epoch` as it completes.
pub fn train_from(
    mut counter: Counter,
    train: &[CounterItem],
    val: &[CounterItem],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let hash = config.hash();
    let mut opt = AdamW::new(&counter.params);
    let views = if config.augment { config.repeats.max(1) } else { 1 };
    let total_steps = config.epochs * (views * train.len()).div_ceil(config.batch_size);
    let mut step = 0;
    let mut order: Vec<usize> = (0..views * train.len()).map(|i| i % train.len()).collect();
    let mut rng = rng::stream(config.seed, &[rng::hash_str("train-order")]);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(train.len());
        for batch in order.chunks(config.batch_size) {
            let mut grads = counter.params.zeros_like();
            for &i in batch {
                let augmented;
                let item = if config.augment {
                    augmented = Augment::draw(&mut rng).apply(&train[i], config.counter.exemplar_side)?;
                    &augmented
                } else {
                    &train[i]
                };
                let negatives = match config.loss {
                    LossMode::DensityContrastive => item.negatives.as_deref(),
                    LossMode::DensityOnly => None,
                };
                let r = counter.loss_and_grad(&item.input, negatives, &item.gt, &mut grads)?;
                if !r.l_total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        image_id: item.image_id.clone(),
                        l_c: r.l_c,
                        l_d: r.l_d,
                    });
                }
                reports.push(r);
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                t.data.iter_mut().for_each(|g| *g *= scale);
            }
            let lr = config.learning_rate_at(step, total_steps);
            step += 1;
            opt.update(&mut counter.params, &grads, config, lr);
        }
        let (val_mae, val_rmse) = if val.is_empty() {
            (None, None)
        } else {
            let pred = predict_counts(&counter, val)?;
            let (mae, rmse) = crate::eval::mae_rmse(val.iter().map(|v| v.gt_count).zip(pred));
            (Some(mae), Some(rmse))
        };
        let log = EpochLog {
            epoch: epoch + 1,
            loss: LossReport::mean(&reports),
            val_mae,
            val_rmse,
            seconds: started.elapsed().as_secs_f64(),
            config_hash: hash.clone(),
        };
        log::info!(
            "epoch {} l_total={:.6} l_d={:.3e} l_c={:.4} val_mae={:?}",
            log.epoch,
            log.loss.l_total,
            log.loss.l_d,
            log.loss.l_c,
            log.val_mae
        );
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint { counter, config_hash: hash },
        epochs,
    })
}

/// Append-free JSON-lines dump of the epoch logs.
pub fn write_epoch_logs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for l in logs {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    crate::dataset::write_file(path, text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannKendall {
    pub s: f64,
    pub z: f64,
    /// Two-sided p-value under the normal approximation.
    pub p_value: f64,
    pub tau: f64,
}

impl MannKendall {
    pub fn decreasing(&self, alpha: f64) -> bool {
        self.s < 0.0 && self.p_value < alpha
    }
}

/// Mann-Kendall trend test with the tie-corrected variance.
pub fn mann_kendall(series: &[f64]) -> MannKendall {
    let n = series.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (series[j] - series[i]).partial_cmp(&0.0).map_or(0.0, |o| o as i32 as f64);
        }
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * (t - 1.0) * (2.0 * t + 5.0);
        i = j + 1;
    }
    let nf = n as f64;
    let var = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - ties) / 18.0;
    let z = if var <= 0.0 {
        0.0
    } else if s > 0.0 {
        (s - 1.0) / var.sqrt()
    } else if s < 0.0 {
        (s + 1.0) / var.sqrt()
    } else {
        0.0
    };
    let normal = Normal::standard();
    let p_value = 2.0 * (1.0 - normal.cdf(z.abs()));
    let pairs = nf * (nf - 1.0) / 2.0;
    MannKendall {
        s,
        z,
        p_value,
        tau: if pairs > 0.0 { s / pairs } else { 0.0 },
    }
}
