//! Single-object filter: a frozen embedding backbone followed by a trainable
//! two-layer head that labels a patch "single" (exactly one object) or
//! "multi" (several objects, or not a clean single instance).

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::CountingRecord;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchLabel {
    Single,
    Multi,
}

impl PatchLabel {
    fn index(self) -> usize {
        match self {
            PatchLabel::Single => 0,
            PatchLabel::Multi => 1,
        }
    }

    fn from_index(i: usize) -> Self {
        if i == 0 {
            PatchLabel::Single
        } else {
            PatchLabel::Multi
        }
    }
}

/// Frozen patch featurizer. Identical input must give identical output.
pub trait EmbeddingBackbone: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn embed(&self, patch: &RgbImage) -> Vec<f64>;
    /// Seed or other identity recorded in head files.
    fn seed(&self) -> u64;
}

const DESK_SIDE: u32 = 32;
const GRID: usize = 4;
const HIST_BINS: usize = 8;
const PROJ_SIDE: usize = 16;
const PROJ_DIM: usize = 32;

/// Training-free featurizer built on a contrast plane: each pixel's RGB
/// distance from the patch mean color, on a 32x32 resize. Features are the
/// plane's 4x4 grid means, its relative-foreground fraction per cell, row and
/// column profiles, a histogram of contrast relative to the patch maximum,
/// RGB gradient energy on a 4x4 grid and a seeded random projection of a
/// 16x16 contrast thumbnail. Permuting the color channels leaves every
/// feature unchanged, so a head trained on a few classes is not tied to
/// their colors.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskBackbone {
    seed: u64,
    projection: Vec<f64>,
}

impl DeskBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::hash_str("desk-backbone")]);
        let n = PROJ_SIDE * PROJ_SIDE;
        let normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("finite std");
        Self {
            seed,
            projection: (0..PROJ_DIM * n).map(|_| normal.sample(&mut rng)).collect(),
        }
    }
}

impl EmbeddingBackbone for DeskBackbone {
    fn embed_dim(&self) -> usize {
        3 * GRID * GRID + HIST_BINS + GRID * GRID + PROJ_DIM
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn embed(&self, patch: &RgbImage) -> Vec<f64> {
        let img = imaging::resize(patch, DESK_SIDE, DESK_SIDE);
        let s = DESK_SIDE as usize;
        let n = s * s;
        let cell = s / GRID;
        let chw = imaging::to_chw(&img);
        let mean: Vec<f64> = (0..3).map(|c| chw[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let contrast: Vec<f64> = (0..n)
            .map(|i| (0..3).map(|c| (chw[c * n + i] - mean[c]).powi(2)).sum::<f64>().sqrt())
            .collect();
        let peak = contrast.iter().cloned().fold(0.0, f64::max).max(1e-6);
        let mut out = Vec::with_capacity(self.embed_dim());

        let cell_mean = |plane: &[f64], gy: usize, gx: usize| {
            let mut acc = 0.0;
            for y in gy * cell..(gy + 1) * cell {
                acc += plane[y * s + gx * cell..y * s + (gx + 1) * cell].iter().sum::<f64>();
            }
            acc / (cell * cell) as f64
        };
        let fg: Vec<f64> = contrast.iter().map(|&v| (v > 0.5 * peak) as u8 as f64).collect();
        for plane in [&contrast, &fg] {
            for gy in 0..GRID {
                for gx in 0..GRID {
                    out.push(cell_mean(plane, gy, gx));
                }
            }
        }
        let band = s / (2 * GRID);
        for b in 0..2 * GRID {
            out.push(contrast[b * band * s..(b + 1) * band * s].iter().sum::<f64>() / (band * s) as f64);
        }
        for b in 0..2 * GRID {
            let acc: f64 = (0..s).flat_map(|y| (b * band..(b + 1) * band).map(move |x| y * s + x)).map(|i| contrast[i]).sum();
            out.push(acc / (band * s) as f64);
        }

        let mut hist = [0.0; HIST_BINS];
        for &v in &contrast {
            hist[((v / peak * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1.0;
        }
        out.extend(hist.iter().map(|h| h / n as f64));

        let at = |c: usize, x: isize, y: isize| {
            let cx = x.clamp(0, s as isize - 1) as usize;
            let cy = y.clamp(0, s as isize - 1) as usize;
            chw[c * n + cy * s + cx]
        };
        let mut grad = vec![0.0; n];
        for y in 0..s as isize {
            for x in 0..s as isize {
                let e: f64 = (0..3)
                    .map(|c| (at(c, x + 1, y) - at(c, x - 1, y)).powi(2) + (at(c, x, y + 1) - at(c, x, y - 1)).powi(2))
                    .sum();
                grad[y as usize * s + x as usize] = e.sqrt();
            }
        }
        for gy in 0..GRID {
            for gx in 0..GRID {
                out.push(cell_mean(&grad, gy, gx));
            }
        }

        let f = s / PROJ_SIDE;
        let mut thumb = vec![0.0; PROJ_SIDE * PROJ_SIDE];
        for (i, t) in thumb.iter_mut().enumerate() {
            let (ty, tx) = (i / PROJ_SIDE, i % PROJ_SIDE);
            let mut acc = 0.0;
            for y in ty * f..(ty + 1) * f {
                for x in tx * f..(tx + 1) * f {
                    acc += contrast[y * s + x];
                }
            }
            *t = acc / (f * f) as f64;
        }
        let m = thumb.iter().sum::<f64>() / thumb.len() as f64;
        thumb.iter_mut().for_each(|v| *v -= m);
        for row in self.projection.chunks(thumb.len()) {
            out.push(row.iter().zip(&thumb).map(|(a, b)| a * b).sum());
        }
        out
    }
}

/// Two affine layers with a ReLU between and a softmax over
/// `[single, multi]`. Inputs are standardized with statistics from the
/// training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterHead {
    pub input_dim: usize,
    pub hidden: usize,
    pub backbone_seed: u64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `[hidden, input_dim]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[2, hidden]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    trained: bool,
}

const CLASSES: usize = 2;

struct HeadTrace {
    x: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: [f64; CLASSES],
}

impl FilterHead {
    /// Untrained head; classifying with it is a usage error.
    pub fn init(input_dim: usize, hidden: usize, backbone_seed: u64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::hash_str("filter-head")]);
        let n1 = Normal::new(0.0, (2.0 / input_dim as f64).sqrt()).expect("finite std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("finite std");
        Self {
            input_dim,
            hidden,
            backbone_seed,
            mean: vec![0.0; input_dim],
            std: vec![1.0; input_dim],
            w1: (0..hidden * input_dim).map(|_| n1.sample(&mut rng)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..CLASSES * hidden).map(|_| n2.sample(&mut rng)).collect(),
            b2: vec![0.0; CLASSES],
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn trace(&self, embedding: &[f64]) -> HeadTrace {
        let x: Vec<f64> = embedding
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let mut pre = self.b1.clone();
        for (j, p) in pre.iter_mut().enumerate() {
            *p += self.w1[j * self.input_dim..(j + 1) * self.input_dim]
                .iter()
                .zip(&x)
                .map(|(w, v)| w * v)
                .sum::<f64>();
        }
        let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut logits = [0.0; CLASSES];
        for (c, l) in logits.iter_mut().enumerate() {
            *l = self.b2[c]
                + self.w2[c * self.hidden..(c + 1) * self.hidden]
                    .iter()
                    .zip(&hidden)
                    .map(|(w, h)| w * h)
                    .sum::<f64>();
        }
        let max = logits[0].max(logits[1]);
        let e = logits.map(|l| (l - max).exp());
        let z = e[0] + e[1];
        HeadTrace { x, pre, hidden, probs: e.map(|v| v / z) }
    }

    /// `[p_single, p_multi]`.
    pub fn probabilities(&self, embedding: &[f64]) -> Result<[f64; 2]> {
        if !self.trained {
            return Err(Error::Usage("single-object filter head is not trained".into()));
        }
        if embedding.len() != self.input_dim {
            return Err(Error::shape(embedding.len(), self.input_dim));
        }
        Ok(self.trace(embedding).probs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HEAD_MAGIC);
        out.push(HEAD_VERSION);
        for d in [self.input_dim, self.hidden, CLASSES] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.backbone_seed.to_le_bytes());
        for part in [&self.mean, &self.std, &self.w1, &self.b1, &self.w2, &self.b2] {
            for &v in part.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format { offset, message };
        if bytes.len() < HEAD_HEADER {
            return Err(fmt(bytes.len(), format!("truncated header: {} of {HEAD_HEADER} bytes", bytes.len())));
        }
        if &bytes[..4] != HEAD_MAGIC {
            return Err(fmt(0, "bad magic, expected \"ZSCF\"".into()));
        }
        if bytes[4] != HEAD_VERSION {
            return Err(fmt(4, format!("unsupported version {}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (input_dim, hidden, classes) = (u32_at(5), u32_at(9), u32_at(13));
        if classes != CLASSES {
            return Err(fmt(13, format!("{classes} output classes, expected {CLASSES}")));
        }
        if input_dim == 0 || hidden == 0 {
            return Err(fmt(5, "zero-sized layer".into()));
        }
        let backbone_seed = u64::from_le_bytes(bytes[17..25].try_into().expect("8 bytes"));
        let sizes = [input_dim, input_dim, hidden * input_dim, hidden, CLASSES * hidden, CLASSES];
        let expected = HEAD_HEADER + 4 * sizes.iter().sum::<usize>();
        if bytes.len() != expected {
            return Err(fmt(
                bytes.len().min(expected),
                format!("payload length {} does not match {expected} for the declared shapes", bytes.len()),
            ));
        }
        let mut pos = HEAD_HEADER;
        let mut parts = Vec::with_capacity(sizes.len());
        for n in sizes {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let x = f32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as f64;
                if !x.is_finite() {
                    return Err(fmt(pos, "non-finite parameter".into()));
                }
                v.push(x);
                pos += 4;
            }
            parts.push(v);
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("six parts");
        Ok(Self {
            input_dim,
            hidden,
            backbone_seed,
            mean: next(),
            std: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            trained: true,
        })
    }
}

const HEAD_MAGIC: &[u8; 4] = b"ZSCF";
const HEAD_VERSION: u8 = 1;
const HEAD_HEADER: usize = 4 + 1 + 12 + 8;

pub fn write_head(path: &Path, head: &FilterHead) -> Result<()> {
    crate::dataset::write_file(path, &head.to_bytes())
}

pub fn read_head(path: &Path) -> Result<FilterHead> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FilterHead::from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: PatchLabel,
    /// Probability of the chosen label.
    pub confidence: f64,
}

/// Anything that can decide whether a patch shows exactly one object.
pub trait PatchClassifier: Send + Sync {
    fn classify(&self, patch: &RgbImage) -> Result<Classification>;
}

/// Backbone plus trained head.
pub struct SingleObjectFilter {
    pub backbone: Box<dyn EmbeddingBackbone>,
    pub head: FilterHead,
}

impl SingleObjectFilter {
    pub fn new(backbone: Box<dyn EmbeddingBackbone>, head: FilterHead) -> Result<Self> {
        if backbone.embed_dim() != head.input_dim {
            return Err(Error::shape(
                format!("backbone dim {}", backbone.embed_dim()),
                format!("head input {}", head.input_dim),
            ));
        }
        Ok(Self { backbone, head })
    }

    /// Desk backbone rebuilt from the seed stored in the head.
    pub fn desk(head: FilterHead) -> Result<Self> {
        Self::new(Box::new(DeskBackbone::new(head.backbone_seed)), head)
    }

    pub fn probabilities(&self, patch: &RgbImage) -> Result<[f64; 2]> {
        self.head.probabilities(&self.backbone.embed(patch))
    }
}

impl PatchClassifier for SingleObjectFilter {
    fn classify(&self, patch: &RgbImage) -> Result<Classification> {
        let p = self.probabilities(patch)?;
        let i = if p[0] >= p[1] { 0 } else { 1 };
        Ok(Classification {
            label: PatchLabel::from_index(i),
            confidence: p[i],
        })
    }
}

/// Accepts every patch.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl PatchClassifier for AcceptAll {
    fn classify(&self, _patch: &RgbImage) -> Result<Classification> {
        Ok(Classification {
            label: PatchLabel::Single,
            confidence: 1.0,
        })
    }
}

/// Counts foreground blobs by connected components. Exact on synthetic
/// scenes (flat dark background, well-separated bright shapes); used as the
/// ideal reference classifier.
#[derive(Debug, Clone, Copy)]
pub struct BlobCounter {
    /// Minimum luminance distance from the border median to be foreground.
    pub contrast: f64,
    pub min_area: usize,
}

impl Default for BlobCounter {
    fn default() -> Self {
        Self {
            contrast: 0.15,
            min_area: 4,
        }
    }
}

impl BlobCounter {
    pub fn count(&self, patch: &RgbImage) -> usize {
        let (w, h) = (patch.width() as usize, patch.height() as usize);
        if w == 0 || h == 0 {
            return 0;
        }
        let lum = imaging::luminance(patch);
        let background = 32.0 / 255.0;
        let fg: Vec<bool> = lum.iter().map(|&v| (v - background).abs() > self.contrast).collect();
        let mut seen = vec![false; w * h];
        let mut blobs = 0;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !fg[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut area = 0;
            while let Some(i) = stack.pop() {
                area += 1;
                let (x, y) = (i % w, i / w);
                let mut visit = |j: usize| {
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            if area >= self.min_area {
                blobs += 1;
            }
        }
        blobs
    }
}

impl PatchClassifier for BlobCounter {
    fn classify(&self, patch: &RgbImage) -> Result<Classification> {
        let label = if self.count(patch) == 1 {
            PatchLabel::Single
        } else {
            PatchLabel::Multi
        };
        Ok(Classification { label, confidence: 1.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct LabeledPatch {
    pub image: RgbImage,
    pub label: PatchLabel,
    pub class_name: String,
    pub source_image: String,
    pub split: SplitTag,
}

#[derive(Debug, Clone, Default)]
pub struct LabeledPatchSet {
    pub patches: Vec<LabeledPatch>,
    /// Records skipped for lacking exemplar boxes.
    pub skipped_records: Vec<String>,
}

impl LabeledPatchSet {
    pub fn count(&self, label: PatchLabel, split: Option<SplitTag>) -> usize {
        self.patches
            .iter()
            .filter(|p| p.label == label && split.is_none_or(|s| p.split == s))
            .count()
    }

    pub fn split(&self, split: SplitTag) -> impl Iterator<Item = &LabeledPatch> {
        self.patches.iter().filter(move |p| p.split == split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    /// Random multi-object crops per image, besides the whole image.
    pub multi_crops: usize,
    /// Crop side range as a fraction of the image side.
    pub crop_fraction: [f64; 2],
    pub min_dots: usize,
    pub max_attempts: usize,
    /// Share of patches assigned to the training split.
    pub train_fraction: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            multi_crops: 2,
            crop_fraction: [0.2, 0.8],
            min_dots: 2,
            max_attempts: 200,
            train_fraction: 0.7,
        }
    }
}

/// Singles are the annotated exemplar crops; multis are the whole image and
/// random crops covering at least `min_dots` annotations. The split keeps
/// classes together where the 7:3 boundary allows.
pub fn build_training_set(records: &[CountingRecord], config: &CurationConfig, seed: u64) -> Result<LabeledPatchSet> {
    let mut set = LabeledPatchSet::default();
    for record in records {
        if record.exemplar_boxes.is_empty() {
            log::warn!("{}: no exemplar boxes, skipped for filter training", record.image_id);
            set.skipped_records.push(record.image_id.clone());
            continue;
        }
        let image = record.image.load()?;
        let mut push = |img: RgbImage, label| {
            set.patches.push(LabeledPatch {
                image: img,
                label,
                class_name: record.class_name.clone(),
                source_image: record.image_id.clone(),
                split: SplitTag::Train,
            })
        };
        for b in &record.exemplar_boxes {
            match imaging::crop(&image, b) {
                Some(c) => push(c, PatchLabel::Single),
                None => log::warn!("{}: exemplar box {:?} too small to crop", record.image_id, b.xyxy()),
            }
        }
        if record.points.len() < config.min_dots {
            continue;
        }
        push((*image).clone(), PatchLabel::Multi);
        let mut rng = rng::stream(seed, &[rng::hash_str(&record.image_id), 0xc409]);
        let (w, h) = (record.width as f64, record.height as f64);
        for _ in 0..config.multi_crops {
            let mut found = None;
            for _ in 0..config.max_attempts {
                let cw = (rng.random_range(config.crop_fraction[0]..=config.crop_fraction[1]) * w).max(2.0);
                let ch = (rng.random_range(config.crop_fraction[0]..=config.crop_fraction[1]) * h).max(2.0);
                let x0 = rng.random_range(0.0..=(w - cw)).floor();
                let y0 = rng.random_range(0.0..=(h - ch)).floor();
                let bbox = BBox::new(x0, y0, (x0 + cw).ceil().min(w), (y0 + ch).ceil().min(h))?;
                let inside = record.points.iter().filter(|p| bbox.contains_point(p.0, p.1)).count();
                if inside >= config.min_dots {
                    found = imaging::crop(&image, &bbox);
                    if found.is_some() {
                        break;
                    }
                }
            }
            match found {
                Some(c) => push(c, PatchLabel::Multi),
                None => log::warn!("{}: no crop covering {} dots", record.image_id, config.min_dots),
            }
        }
    }
    assign_splits(&mut set.patches, config.train_fraction, seed);
    Ok(set)
}

fn assign_splits(patches: &mut [LabeledPatch], train_fraction: f64, seed: u64) {
    let mut classes: Vec<String> = patches.iter().map(|p| p.class_name.clone()).collect();
    classes.sort();
    classes.dedup();
    let mut rng = rng::stream(seed, &[0x5e1f]);
    classes.shuffle(&mut rng);
    let mut order = Vec::with_capacity(patches.len());
    for class in &classes {
        let mut idx: Vec<usize> = (0..patches.len()).filter(|&i| &patches[i].class_name == class).collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let n_train = (train_fraction * patches.len() as f64).round() as usize;
    for (rank, &i) in order.iter().enumerate() {
        patches[i].split = if rank < n_train { SplitTag::Train } else { SplitTag::Eval };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden width; `None` means half the embedding width.
    pub hidden: Option<usize>,
    pub seed: u64,
}

impl Default for FilterTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 16,
            hidden: None,
            seed: 0,
        }
    }
}

impl FilterTrainConfig {
    /// Larger step for the small desk-scale patch sets.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterReport {
    pub head: FilterHead,
    pub train_accuracy: f64,
    /// `None` when the eval split is empty.
    pub eval_accuracy: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

pub fn accuracy(head: &FilterHead, data: &[(Vec<f64>, PatchLabel)]) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    let correct = data
        .iter()
        .filter(|(x, label)| {
            let p = head.trace(x).probs;
            let pred = if p[0] >= p[1] { PatchLabel::Single } else { PatchLabel::Multi };
            pred == *label
        })
        .count();
    Some(correct as f64 / data.len() as f64)
}

/// Cross-entropy training of a head on precomputed embeddings with Adam.
pub fn train_head(
    train: &[(Vec<f64>, PatchLabel)],
    eval: &[(Vec<f64>, PatchLabel)],
    backbone_seed: u64,
    config: &FilterTrainConfig,
) -> Result<FilterReport> {
    let Some(dim) = train.first().map(|(x, _)| x.len()) else {
        return Err(Error::Config("empty filter training split".into()));
    };
    if train.iter().chain(eval).any(|(x, _)| x.len() != dim) {
        return Err(Error::Config("embeddings of different widths".into()));
    }
    let singles = train.iter().filter(|(_, l)| *l == PatchLabel::Single).count();
    if singles == 0 || singles == train.len() {
        return Err(Error::Config("filter training split holds a single label".into()));
    }
    if !(config.learning_rate >= 0.0 && config.batch_size > 0) {
        return Err(Error::Config("filter learning rate must be >= 0 and batch size > 0".into()));
    }
    let hidden = config.hidden.unwrap_or((dim / 2).max(1));
    let mut head = FilterHead::init(dim, hidden, backbone_seed, config.seed);

    let n = train.len() as f64;
    for d in 0..dim {
        let mean = train.iter().map(|(x, _)| x[d]).sum::<f64>() / n;
        let var = train.iter().map(|(x, _)| (x[d] - mean).powi(2)).sum::<f64>() / n;
        head.mean[d] = mean;
        head.std[d] = var.sqrt().max(1e-6);
    }

    let sizes = [head.w1.len(), head.b1.len(), head.w2.len(), head.b2.len()];
    let mut adam: Vec<(Vec<f64>, Vec<f64>)> = sizes.iter().map(|&s| (vec![0.0; s], vec![0.0; s])).collect();
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut step = 0;
    let mut rng = rng::stream(config.seed, &[rng::hash_str("filter-train")]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            for &i in batch {
                let (x, label) = &train[i];
                let t = head.trace(x);
                epoch_loss -= t.probs[label.index()].max(1e-300).ln();
                let mut dlogit = t.probs;
                dlogit[label.index()] -= 1.0;
                let mut dh = vec![0.0; hidden];
                for c in 0..CLASSES {
                    for j in 0..hidden {
                        grads[2][c * hidden + j] += dlogit[c] * t.hidden[j];
                        dh[j] += dlogit[c] * head.w2[c * hidden + j];
                    }
                    grads[3][c] += dlogit[c];
                }
                for j in 0..hidden {
                    if t.pre[j] <= 0.0 {
                        continue;
                    }
                    grads[1][j] += dh[j];
                    for (g, xv) in grads[0][j * dim..(j + 1) * dim].iter_mut().zip(&t.x) {
                        *g += dh[j] * xv;
                    }
                }
            }
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let bc1 = 1.0 - f64::powi(beta1, step);
            let bc2 = 1.0 - f64::powi(beta2, step);
            let params: [&mut Vec<f64>; 4] = [&mut head.w1, &mut head.b1, &mut head.w2, &mut head.b2];
            for ((p, g), (m, v)) in params.into_iter().zip(&grads).zip(adam.iter_mut()) {
                for i in 0..p.len() {
                    let gi = g[i] * scale;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    p[i] -= config.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                }
            }
        }
        epoch_losses.push(epoch_loss / n);
    }
    head.trained = true;
    Ok(FilterReport {
        train_accuracy: accuracy(&head, train).unwrap_or(0.0),
        eval_accuracy: accuracy(&head, eval),
        head,
        epoch_losses,
    })
}

/// Embeds the curated patches with the frozen backbone and trains a head on
/// the train split; accuracy is reported on the eval split.
pub fn train_filter(
    data: &LabeledPatchSet,
    backbone: &dyn EmbeddingBackbone,
    config: &FilterTrainConfig,
) -> Result<FilterReport> {
    let embed = |tag| -> Vec<(Vec<f64>, PatchLabel)> {
        data.split(tag).map(|p| (backbone.embed(&p.image), p.label)).collect()
    };
    train_head(&embed(SplitTag::Train), &embed(SplitTag::Eval), backbone.seed(), config)
}

/// Label-permutation control: same patches, labels shuffled across the set.
pub fn shuffle_labels(data: &LabeledPatchSet, seed: u64) -> LabeledPatchSet {
    let mut out = data.clone();
    let mut labels: Vec<PatchLabel> = out.patches.iter().map(|p| p.label).collect();
    labels.shuffle(&mut rng::stream(seed, &[0x54f1]));
    for (p, l) in out.patches.iter_mut().zip(labels) {
        p.label = l;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, seed: u64) -> Vec<(Vec<f64>, PatchLabel)> {
        let mut rng = rng::stream(seed, &[]);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { PatchLabel::Single } else { PatchLabel::Multi };
                let sign = if label == PatchLabel::Single { 1.0 } else { -1.0 };
                let x = (0..6)
                    .map(|d| if d == 0 { sign * rng.random_range(0.5..2.0) } else { rng.random_range(-1.0..1.0) })
                    .collect();
                (x, label)
            })
            .collect()
    }

    #[test]
    fn separable_embeddings_are_learned_exactly() {
        let cfg = FilterTrainConfig { learning_rate: 1e-2, epochs: 60, ..FilterTrainConfig::default() };
        let r = train_head(&separable(140, 1), &separable(60, 2), 0, &cfg).unwrap();
        assert_eq!(r.eval_accuracy, Some(1.0));
        let p = r.head.probabilities(&separable(1, 3)[0].0).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_label_split_is_rejected() {
        let data: Vec<_> = separable(10, 1).into_iter().filter(|(_, l)| *l == PatchLabel::Multi).collect();
        assert!(matches!(train_head(&data, &[], 0, &FilterTrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn untrained_head_is_a_usage_error() {
        let head = FilterHead::init(104, 52, 0, 0);
        let f = SingleObjectFilter::desk(head).unwrap();
        assert!(matches!(f.classify(&RgbImage::new(8, 8)), Err(Error::Usage(_))));
    }

    #[test]
    fn head_file_round_trip_and_corruption() {
        let mut head = FilterHead::init(6, 3, 7, 1);
        head.trained = true;
        let head = FilterHead::from_bytes(&head.to_bytes()).unwrap();
        let bytes = head.to_bytes();
        assert_eq!(FilterHead::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        assert_eq!(head.backbone_seed, 7);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FilterHead::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(FilterHead::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(
            FilterHead::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn backbone_is_deterministic_and_sized() {
        let b = DeskBackbone::new(3);
        let img = RgbImage::from_fn(20, 12, |x, y| image::Rgb([(x * 10) as u8, (y * 20) as u8, 7]));
        let e = b.embed(&img);
        assert_eq!(e.len(), b.embed_dim());
        assert_eq!(e, DeskBackbone::new(3).embed(&img));
        assert_ne!(e, DeskBackbone::new(4).embed(&img));
    }

    #[test]
    fn blob_counter_counts_separated_squares() {
        let mut img = RgbImage::from_pixel(20, 10, image::Rgb([32, 32, 32]));
        for (x0, x1) in [(2, 6), (10, 15)] {
            for y in 3..7 {
                for x in x0..x1 {
                    img.put_pixel(x, y, image::Rgb([220, 40, 40]));
                }
            }
        }
        assert_eq!(BlobCounter::default().count(&img), 2);
        let one = image::imageops::crop_imm(&img, 0, 0, 8, 10).to_image();
        assert_eq!(BlobCounter::default().classify(&one).unwrap().label, PatchLabel::Single);
    }
}
