//! Exemplar mining: detect with the class prompt and the generic prompt,
//! threshold, drop negatives overlapping any positive, single-object filter
//! both streams, keep the top-k of each.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CountingRecord;
use crate::detector::{DetectionRequest, Detector, GENERIC_PROMPT};
use crate::error::{Error, Result};
use crate::filter::{PatchClassifier, PatchLabel};
use crate::geometry::{dedup_negatives, iou, sort_ranked, BBox, ScoredBox};
use crate::imaging;
use crate::rng;

pub const BACKGROUND_PROMPT: &str = "background";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPolicy {
    /// Empty positives: accept the best unfiltered box, then retry once at
    /// half the logit threshold, then fail.
    Ladder,
    /// Empty positives fail immediately.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tau_l: f64,
    pub tau_iou: f64,
    pub k: usize,
    pub negative_prompt: String,
    pub fallback: FallbackPolicy,
    /// Side of the square exemplar patches handed to the counter.
    pub exemplar_side: u32,
    pub background_attempts: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_l: 0.02,
            tau_iou: 0.5,
            k: 3,
            negative_prompt: GENERIC_PROMPT.to_string(),
            fallback: FallbackPolicy::Ladder,
            exemplar_side: 64,
            background_attempts: 100,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau_l) {
            return Err(Error::Config(format!("tau_l {} outside [0, 1)", self.tau_l)));
        }
        if !(self.tau_iou > 0.0 && self.tau_iou <= 1.0) {
            return Err(Error::Config(format!("tau_iou {} outside (0, 1]", self.tau_iou)));
        }
        if self.k == 0 || self.exemplar_side < 2 {
            return Err(Error::Config("k must be >= 1 and exemplar_side >= 2".into()));
        }
        if self.negative_prompt.trim().is_empty() {
            return Err(Error::Config("negative prompt must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveFallback {
    None,
    /// Highest-logit box accepted despite the filter.
    RelaxedClassifier,
    /// Candidates found only at half the logit threshold.
    HalvedThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeFallback {
    None,
    /// Random background crops stand in for detector negatives.
    Background,
    /// No negatives available; the contrastive term is off for this image.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub positive_fallback: PositiveFallback,
    pub negative_fallback: NegativeFallback,
    /// Logit threshold that produced the positives.
    pub tau_l: f64,
    pub positive_candidates: usize,
    pub negative_candidates: usize,
    pub negatives_after_dedup: usize,
    /// Candidates too small to crop, across both streams.
    pub skipped_small: usize,
}

impl PairMeta {
    pub fn contrastive_active(&self) -> bool {
        self.negative_fallback != NegativeFallback::Disabled
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub source: ScoredBox,
    /// Classifier probability of "single", when a classifier ran.
    pub confidence: Option<f64>,
    /// Crop of `source.bbox`, resized to the exemplar side.
    pub patch: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarPair {
    pub image_id: String,
    pub positives: Vec<Exemplar>,
    pub negatives: Vec<Exemplar>,
    pub meta: PairMeta,
}

impl ExemplarPair {
    pub fn positive_patches(&self) -> Vec<RgbImage> {
        self.positives.iter().map(|e| e.patch.clone()).collect()
    }

    pub fn negative_patches(&self) -> Vec<RgbImage> {
        self.negatives.iter().map(|e| e.patch.clone()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<ScoredBox>,
    /// Classifier confidence of each kept box, aligned with `kept`.
    pub confidences: Vec<f64>,
    pub skipped_small: usize,
}

/// Keep the candidates whose crop the classifier labels single, in order.
/// Crops under 2x2 pixels are skipped and counted.
pub fn filter_single_object(
    candidates: &[ScoredBox],
    image: &RgbImage,
    classifier: &dyn PatchClassifier,
) -> Result<FilterOutcome> {
    let mut out = FilterOutcome::default();
    for c in candidates {
        let Some(patch) = imaging::crop(image, &c.bbox) else {
            out.skipped_small += 1;
            continue;
        };
        let verdict = classifier.classify(&patch)?;
        if verdict.label == PatchLabel::Single {
            out.kept.push(c.clone());
            out.confidences.push(verdict.confidence);
        }
    }
    if out.skipped_small > 0 {
        log::warn!("{} candidate(s) smaller than 2x2 pixels skipped", out.skipped_small);
    }
    Ok(out)
}

/// The `k` best candidates by logit, ties broken by larger area then input
/// order.
pub fn select_top_k(candidates: &[ScoredBox], k: usize) -> Vec<ScoredBox> {
    assert!(k >= 1, "k must be at least 1");
    let mut v = candidates.to_vec();
    sort_ranked(&mut v);
    v.truncate(k);
    v
}

pub struct ExemplarPipeline<'a> {
    pub detector: &'a dyn Detector,
    /// `None` skips single-object filtering.
    pub classifier: Option<&'a dyn PatchClassifier>,
    pub config: PipelineConfig,
}

struct StreamResult {
    kept: Vec<ScoredBox>,
    confidences: Vec<Option<f64>>,
    skipped_small: usize,
}

impl<'a> ExemplarPipeline<'a> {
    pub fn new(
        detector: &'a dyn Detector,
        classifier: Option<&'a dyn PatchClassifier>,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self { detector, classifier, config })
    }

    /// Threshold-filtered detections for the class prompt and the negative
    /// prompt.
    pub fn propose_candidates(&self, record: &CountingRecord, tau_l: f64) -> Result<(Vec<ScoredBox>, Vec<ScoredBox>)> {
        if record.class_name.trim().is_empty() {
            return Err(Error::Usage(format!("{}: empty class name", record.image_id)));
        }
        let pos = self
            .detector
            .detect(&DetectionRequest::for_record(record, &record.class_name, tau_l))?;
        let neg = self
            .detector
            .detect(&DetectionRequest::for_record(record, &self.config.negative_prompt, tau_l))?;
        Ok((pos.boxes, neg.boxes))
    }

    fn filter(&self, candidates: &[ScoredBox], image: &RgbImage) -> Result<StreamResult> {
        match self.classifier {
            Some(c) => {
                let o = filter_single_object(candidates, image, c)?;
                Ok(StreamResult {
                    kept: o.kept,
                    confidences: o.confidences.into_iter().map(Some).collect(),
                    skipped_small: o.skipped_small,
                })
            }
            None => {
                let kept: Vec<ScoredBox> = candidates
                    .iter()
                    .filter(|c| imaging::crop(image, &c.bbox).is_some())
                    .cloned()
                    .collect();
                Ok(StreamResult {
                    confidences: vec![None; kept.len()],
                    skipped_small: candidates.len() - kept.len(),
                    kept,
                })
            }
        }
    }

    fn top_k(&self, stream: &StreamResult, image: &RgbImage) -> Vec<Exemplar> {
        let conf: BTreeMap<usize, Option<f64>> = stream.confidences.iter().copied().enumerate().collect();
        let mut idx: Vec<usize> = (0..stream.kept.len()).collect();
        idx.sort_by(|&a, &b| crate::geometry::rank_cmp(&stream.kept[a], &stream.kept[b]));
        idx.truncate(self.config.k);
        idx.into_iter()
            .filter_map(|i| {
                let b = &stream.kept[i];
                let patch = imaging::crop_resized(image, &b.bbox, self.config.exemplar_side)?;
                Some(Exemplar { source: b.clone(), confidence: conf[&i], patch })
            })
            .collect()
    }

    /// Full mining for one record, with the fallbacks for empty streams.
    pub fn build(&self, record: &CountingRecord) -> Result<ExemplarPair> {
        let image = record.image.load()?;
        let mut tau_l = self.config.tau_l;
        let mut positive_fallback = PositiveFallback::None;
        let mut attempt = 0;
        let (positives, pos_stream, neg_raw, negs_dedup, neg_stream) = loop {
            let (positives, neg_raw) = self.propose_candidates(record, tau_l)?;
            let negs = dedup_negatives(&neg_raw, &positives, self.config.tau_iou);
            let mut pos_stream = self.filter(&positives, &image)?;
            let neg_stream = self.filter(&negs, &image)?;
            if pos_stream.kept.is_empty() && self.config.fallback == FallbackPolicy::Ladder {
                // Relax the classifier: best unfiltered box that can be cropped.
                let mut ranked = positives.clone();
                sort_ranked(&mut ranked);
                if let Some(best) = ranked.into_iter().find(|b| imaging::crop(&image, &b.bbox).is_some()) {
                    pos_stream.kept.push(best);
                    pos_stream.confidences.push(None);
                    if positive_fallback == PositiveFallback::None {
                        positive_fallback = PositiveFallback::RelaxedClassifier;
                    }
                }
            }
            if !pos_stream.kept.is_empty() || self.config.fallback == FallbackPolicy::Strict || attempt == 1 {
                break (positives, pos_stream, neg_raw, negs, neg_stream);
            }
            attempt += 1;
            tau_l /= 2.0;
            positive_fallback = PositiveFallback::HalvedThreshold;
            log::info!("{}: no positives, retrying at tau_l={tau_l}", record.image_id);
        };
        if pos_stream.kept.is_empty() {
            return Err(Error::NoPositives { image_id: record.image_id.clone() });
        }

        let pos = self.top_k(&pos_stream, &image);
        let mut neg = self.top_k(&neg_stream, &image);
        let mut negative_fallback = NegativeFallback::None;
        if neg.is_empty() {
            let side = pos
                .iter()
                .map(|e| (e.source.bbox.width() + e.source.bbox.height()) / 2.0)
                .fold(0.0, f64::max);
            neg = self.background_negatives(record, &image, &positives, side)?;
            negative_fallback = if neg.is_empty() {
                NegativeFallback::Disabled
            } else {
                NegativeFallback::Background
            };
        }
        Ok(ExemplarPair {
            image_id: record.image_id.clone(),
            positives: pos,
            negatives: neg,
            meta: PairMeta {
                positive_fallback,
                negative_fallback,
                tau_l,
                positive_candidates: positives.len(),
                negative_candidates: neg_raw.len(),
                negatives_after_dedup: negs_dedup.len(),
                skipped_small: pos_stream.skipped_small + neg_stream.skipped_small,
            },
        })
    }

    /// Up to `k` seeded square crops of side `side` whose IoU with every
    /// positive candidate stays below `tau_iou`.
    fn background_negatives(
        &self,
        record: &CountingRecord,
        image: &RgbImage,
        positives: &[ScoredBox],
        side: f64,
    ) -> Result<Vec<Exemplar>> {
        let (w, h) = (record.width as f64, record.height as f64);
        let side = side.clamp(2.0, w.min(h));
        let mut rng = rng::stream(self.config.seed, &[rng::hash_str(&record.image_id), 0xb6]);
        let mut out: Vec<Exemplar> = Vec::new();
        for _ in 0..self.config.background_attempts {
            if out.len() == self.config.k {
                break;
            }
            let x0 = rng.random_range(0.0..=(w - side)).floor();
            let y0 = rng.random_range(0.0..=(h - side)).floor();
            let bbox = BBox::new(x0, y0, (x0 + side).min(w), (y0 + side).min(h))?;
            let clear = positives.iter().all(|p| iou(&bbox, &p.bbox) < self.config.tau_iou)
                && out.iter().all(|e| iou(&bbox, &e.source.bbox) < self.config.tau_iou);
            if !clear {
                continue;
            }
            if let Some(patch) = imaging::crop_resized(image, &bbox, self.config.exemplar_side) {
                out.push(Exemplar {
                    source: ScoredBox::new(bbox, 0.0, BACKGROUND_PROMPT)?,
                    confidence: None,
                    patch,
                });
            }
        }
        Ok(out)
    }
}

/// One line of the exemplar cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarEntry {
    pub image: String,
    pub positives: Vec<CachedBox>,
    pub negatives: Vec<CachedBox>,
    pub meta: PairMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedBox {
    pub xyxy: [f64; 4],
    pub logit: f64,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    /// Crop file relative to the cache directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<String>,
}

pub const CACHE_FILE: &str = "exemplars.jsonl";
pub const CROPS_DIR: &str = "crops";

fn crop_name(image_id: &str, stream: &str, i: usize) -> String {
    let stem: String = image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{CROPS_DIR}/{stem}_{stream}{i}.png")
}

impl ExemplarPair {
    pub fn to_entry(&self) -> ExemplarEntry {
        let boxes = |v: &[Exemplar], stream: &str| {
            v.iter()
                .enumerate()
                .map(|(i, e)| CachedBox {
                    xyxy: e.source.bbox.xyxy(),
                    logit: e.source.logit,
                    prompt: e.source.source_prompt.clone(),
                    confidence: e.confidence,
                    patch: Some(crop_name(&self.image_id, stream, i)),
                })
                .collect()
        };
        ExemplarEntry {
            image: self.image_id.clone(),
            positives: boxes(&self.positives, "p"),
            negatives: boxes(&self.negatives, "n"),
            meta: self.meta.clone(),
        }
    }

    /// Rebuild from a cache entry by re-cropping the source image.
    pub fn from_entry(entry: &ExemplarEntry, image: &RgbImage, side: u32) -> Result<Self> {
        let exemplars = |v: &[CachedBox]| -> Result<Vec<Exemplar>> {
            v.iter()
                .map(|c| {
                    let [x0, y0, x1, y1] = c.xyxy;
                    let source = ScoredBox::new(BBox::new(x0, y0, x1, y1)?, c.logit, c.prompt.clone())?;
                    let patch = imaging::crop_resized(image, &source.bbox, side).ok_or_else(|| {
                        Error::Geometry(format!("{}: cached box {:?} too small to crop", entry.image, c.xyxy))
                    })?;
                    Ok(Exemplar { source, confidence: c.confidence, patch })
                })
                .collect()
        };
        Ok(Self {
            image_id: entry.image.clone(),
            positives: exemplars(&entry.positives)?,
            negatives: exemplars(&entry.negatives)?,
            meta: entry.meta.clone(),
        })
    }
}

/// Writes `exemplars.jsonl` and the crops under `crops/`.
pub fn write_cache(dir: &Path, pairs: &[ExemplarPair]) -> Result<()> {
    let mut lines = String::new();
    for pair in pairs {
        let entry = pair.to_entry();
        for (e, c) in pair.positives.iter().zip(&entry.positives).chain(pair.negatives.iter().zip(&entry.negatives)) {
            let rel = c.patch.as_deref().expect("patch names are always set on write");
            imaging::save_png(&e.patch, &dir.join(rel))?;
        }
        lines.push_str(&serde_json::to_string(&entry)?);
        lines.push('\n');
    }
    crate::dataset::write_file(&dir.join(CACHE_FILE), lines.as_bytes())
}

pub fn read_cache(dir: &Path) -> Result<Vec<ExemplarEntry>> {
    let path = dir.join(CACHE_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{NoiseSpec, SyntheticDetector};
    use crate::filter::{AcceptAll, BlobCounter};
    use crate::synthetic::{scene_record, SceneObject, ShapeKind, SyntheticScene};
    use std::sync::Arc;

    fn sb(x0: f64, y0: f64, x1: f64, y1: f64, logit: f64) -> ScoredBox {
        ScoredBox::new(BBox::new(x0, y0, x1, y1).unwrap(), logit, "t").unwrap()
    }

    fn obj(class: &str, shape: ShapeKind, color: [u8; 3], c: (f64, f64)) -> SceneObject {
        SceneObject {
            class_name: class.into(),
            shape,
            color,
            center: c,
            radius: 5.0,
            distractor: class != "circle",
        }
    }

    fn scene(objects: Vec<SceneObject>) -> SyntheticScene {
        SyntheticScene {
            image_id: "s.png".into(),
            width: 64,
            height: 64,
            seed: 11,
            target_class: "circle".into(),
            objects,
        }
    }

    fn five_and_three() -> SyntheticScene {
        let red = [230, 60, 60];
        let blue = [60, 90, 230];
        let mut o: Vec<_> = [(8.0, 8.0), (30.0, 8.0), (54.0, 10.0), (10.0, 32.0), (32.0, 32.0)]
            .into_iter()
            .map(|c| obj("circle", ShapeKind::Circle, red, c))
            .collect();
        o.extend([(10.0, 54.0), (32.0, 54.0), (54.0, 54.0)].into_iter().map(|c| obj("square", ShapeKind::Square, blue, c)));
        scene(o)
    }

    fn record(s: &SyntheticScene) -> CountingRecord {
        scene_record(s, Arc::new(s.render()))
    }

    #[test]
    fn top_k_examples() {
        let c = [sb(0., 0., 2., 2., 0.9), sb(0., 0., 2., 2., 0.8), sb(0., 0., 2., 2., 0.7), sb(0., 0., 2., 2., 0.6)];
        assert_eq!(select_top_k(&c, 3), c[..3].to_vec());
        assert_eq!(select_top_k(&c[..2], 3), c[..2].to_vec());
        let t = [sb(0., 0., 2., 2., 0.5), sb(0., 0., 3., 3., 0.5), sb(0., 0., 1., 1., 0.5)];
        assert_eq!(select_top_k(&t, 2), vec![t[1].clone(), t[0].clone()]);
    }

    #[test]
    fn filter_keeps_single_blob_boxes() {
        let mut s = five_and_three();
        s.objects.truncate(2);
        let img = s.render();
        let one = sb(2.0, 2.0, 14.0, 14.0, 0.9);
        let two = sb(2.0, 2.0, 36.0, 14.0, 0.8);
        let out = filter_single_object(&[one.clone(), two.clone()], &img, &BlobCounter::default()).unwrap();
        assert_eq!(out.kept, vec![one]);
        assert!(filter_single_object(&[], &img, &BlobCounter::default()).unwrap().kept.is_empty());
        let all = filter_single_object(&[sb(2., 2., 14., 14., 0.9), two.clone()], &img, &AcceptAll).unwrap();
        assert_eq!(all.kept.len(), 2);
        let tiny = filter_single_object(&[sb(2.0, 2.0, 2.5, 9.0, 0.9)], &img, &AcceptAll).unwrap();
        assert_eq!(tiny.skipped_small, 1);
    }

    #[test]
    fn five_circles_three_squares() {
        let s = five_and_three();
        let det = SyntheticDetector::new([s.clone()], NoiseSpec::none());
        let blob = BlobCounter::default();
        let p = ExemplarPipeline::new(&det, Some(&blob), PipelineConfig::default()).unwrap();
        let r = record(&s);
        let (pos, neg) = p.propose_candidates(&r, 0.02).unwrap();
        assert_eq!((pos.len(), neg.len()), (5, 8));
        let pair = p.build(&r).unwrap();
        assert_eq!(pair.positives.len(), 3);
        assert!(!pair.negatives.is_empty() && pair.negatives.len() <= 3);
        for n in &pair.negatives {
            for q in &pos {
                assert!(iou(&n.source.bbox, &q.bbox) < 0.5);
            }
            assert!(n.source.bbox.y_min() > 40.0, "negatives are squares");
        }
        assert_eq!(pair.meta.positive_fallback, PositiveFallback::None);
        assert_eq!(pair, p.build(&r).unwrap());
    }

    #[test]
    fn target_only_scene_falls_back_to_background() {
        let mut s = five_and_three();
        s.objects.truncate(5);
        let det = SyntheticDetector::new([s.clone()], NoiseSpec::none());
        let p = ExemplarPipeline::new(&det, Some(&AcceptAll), PipelineConfig::default()).unwrap();
        let r = record(&s);
        let (pos, neg) = p.propose_candidates(&r, 0.02).unwrap();
        let mut a: Vec<_> = pos.iter().map(|b| b.bbox.xyxy()).collect();
        let mut b: Vec<_> = neg.iter().map(|b| b.bbox.xyxy()).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
        let pair = p.build(&r).unwrap();
        assert_eq!(pair.meta.negatives_after_dedup, 0);
        assert_eq!(pair.meta.negative_fallback, NegativeFallback::Background);
        assert!(pair.negatives.iter().all(|n| pos.iter().all(|q| iou(&n.source.bbox, &q.bbox) < 0.5)));
    }

    #[test]
    fn empty_scene_has_no_candidates_and_strict_fails() {
        let s = scene(Vec::new());
        let det = SyntheticDetector::new([s.clone()], NoiseSpec::none());
        let cfg = PipelineConfig { fallback: FallbackPolicy::Strict, ..PipelineConfig::default() };
        let p = ExemplarPipeline::new(&det, None, cfg).unwrap();
        let r = record(&s);
        let (pos, neg) = p.propose_candidates(&r, 0.02).unwrap();
        assert!(pos.is_empty() && neg.is_empty());
        assert!(matches!(p.build(&r), Err(Error::NoPositives { .. })));
    }

    #[test]
    fn merged_boxes_are_rejected_and_fallback_engages() {
        let red = [230, 60, 60];
        let s = scene(vec![
            obj("circle", ShapeKind::Circle, red, (12.0, 20.0)),
            obj("circle", ShapeKind::Circle, red, (26.0, 20.0)),
        ]);
        let noise = NoiseSpec { merge_rate: 1.0, ..NoiseSpec::none() };
        let det = SyntheticDetector::new([s.clone()], noise);
        let blob = BlobCounter::default();
        let p = ExemplarPipeline::new(&det, Some(&blob), PipelineConfig::default()).unwrap();
        let r = record(&s);
        let (pos, _) = p.propose_candidates(&r, 0.02).unwrap();
        assert_eq!(pos.len(), 1);
        let img = s.render();
        assert!(filter_single_object(&pos, &img, &blob).unwrap().kept.is_empty());
        let pair = p.build(&r).unwrap();
        assert_ne!(pair.meta.positive_fallback, PositiveFallback::None);
        assert_eq!(pair.positives.len(), 1);
    }

    #[test]
    fn cache_round_trip_recrops() {
        let s = five_and_three();
        let det = SyntheticDetector::new([s.clone()], NoiseSpec::none());
        let p = ExemplarPipeline::new(&det, None, PipelineConfig::default()).unwrap();
        let pair = p.build(&record(&s)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cache(dir.path(), std::slice::from_ref(&pair)).unwrap();
        let entries = read_cache(dir.path()).unwrap();
        assert_eq!(entries.len(), 1);
        let back = ExemplarPair::from_entry(&entries[0], &s.render(), 64).unwrap();
        assert_eq!(back, pair);
        assert!(dir.path().join(entries[0].positives[0].patch.as_ref().unwrap()).exists());
    }
}
