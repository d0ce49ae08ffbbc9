use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DetectionRequest, DetectionResponse, Detector, GENERIC_PROMPT};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};
use crate::rng;
use crate::synthetic::SyntheticScene;

/// Corruptions applied by the synthetic oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Per-coordinate shift, as a fraction of the object size.
    pub jitter: f64,
    /// Fraction of matched objects that end up in merged pair boxes.
    pub merge_rate: f64,
    /// Spurious background boxes per call.
    pub spurious: usize,
    /// Lowest logit of a spurious box; the highest is 0.3.
    pub spurious_logit_floor: f64,
    /// Standard deviation of additive logit noise.
    pub logit_noise: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            jitter: 0.0,
            merge_rate: 0.0,
            spurious: 0,
            spurious_logit_floor: 0.02,
            logit_noise: 0.0,
            seed: 0,
        }
    }
}

const MATCH_LOGIT: (f64, f64) = (0.5, 1.0);
const SPURIOUS_LOGIT_MAX: f64 = 0.3;
const MERGE_LOGIT_BONUS: f64 = 0.05;
const SPURIOUS_SIDE: (f64, f64) = (0.15, 0.5);

/// Ground-truth detections for `prompt`: objects of that class, or every
/// object for the generic prompt, corrupted according to `noise`. A prompt
/// naming no object in the scene yields no boxes.
pub fn synthetic_detect(scene: &SyntheticScene, prompt: &str, noise: &NoiseSpec) -> DetectionResponse {
    let generic = prompt == GENERIC_PROMPT;
    let matched: Vec<_> = scene
        .objects
        .iter()
        .filter(|o| generic || o.class_name == prompt)
        .collect();
    let response = |boxes| DetectionResponse {
        boxes,
        prompt_echo: prompt.to_string(),
        detector_id: "synthetic".to_string(),
    };
    if matched.is_empty() && !generic {
        return response(Vec::new());
    }

    let mut rng = rng::stream(noise.seed, &[scene.seed, rng::hash_str(prompt)]);
    let logit_noise = Normal::new(0.0, noise.logit_noise.max(0.0)).expect("finite std");
    let mut entries: Vec<(BBox, f64)> = matched
        .iter()
        .map(|o| {
            let mut bbox = o.bbox();
            if noise.jitter > 0.0 {
                let span = noise.jitter * 2.0 * o.radius;
                let d: [f64; 4] = std::array::from_fn(|_| rng.random_range(-span..=span));
                let c = bbox.xyxy();
                if let Ok(j) = BBox::new(c[0] + d[0], c[1] + d[1], c[2] + d[2], c[3] + d[3]) {
                    bbox = j;
                }
            }
            let mut logit = rng.random_range(MATCH_LOGIT.0..=MATCH_LOGIT.1);
            if noise.logit_noise > 0.0 {
                logit = (logit + logit_noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            (bbox, logit)
        })
        .collect();

    let pairs = (noise.merge_rate.clamp(0.0, 1.0) * entries.len() as f64 / 2.0).round() as usize;
    if pairs > 0 {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut rng);
        let mut merged = vec![false; entries.len()];
        let mut unions = Vec::new();
        for &i in &order {
            if unions.len() == pairs {
                break;
            }
            if merged[i] {
                continue;
            }
            let ci = entries[i].0.center();
            let nearest = (0..entries.len())
                .filter(|&j| j != i && !merged[j])
                .min_by(|&a, &b| {
                    let da = dist2(ci, entries[a].0.center());
                    let db = dist2(ci, entries[b].0.center());
                    da.total_cmp(&db)
                });
            if let Some(j) = nearest {
                merged[i] = true;
                merged[j] = true;
                let logit = (entries[i].1.max(entries[j].1) + MERGE_LOGIT_BONUS).min(1.0);
                unions.push((entries[i].0.union_box(&entries[j].0), logit));
            }
        }
        entries = entries
            .into_iter()
            .zip(&merged)
            .filter(|(_, &m)| !m)
            .map(|(e, _)| e)
            .chain(unions)
            .collect();
    }

    let (w, h) = (scene.width as f64, scene.height as f64);
    for _ in 0..noise.spurious {
        let bw = rng.random_range(SPURIOUS_SIDE.0..=SPURIOUS_SIDE.1) * w;
        let bh = rng.random_range(SPURIOUS_SIDE.0..=SPURIOUS_SIDE.1) * h;
        let x0 = rng.random_range(0.0..=(w - bw));
        let y0 = rng.random_range(0.0..=(h - bh));
        let lo = noise.spurious_logit_floor.min(SPURIOUS_LOGIT_MAX);
        let logit = rng.random_range(lo..=SPURIOUS_LOGIT_MAX);
        entries.push((BBox::new(x0, y0, x0 + bw, y0 + bh).expect("positive side"), logit));
    }

    response(
        entries
            .into_iter()
            .map(|(bbox, logit)| ScoredBox {
                bbox,
                logit,
                source_prompt: prompt.to_string(),
            })
            .collect(),
    )
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Oracle detector over a table of synthetic scenes keyed by image id.
#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    scenes: BTreeMap<String, SyntheticScene>,
    noise: NoiseSpec,
}

impl SyntheticDetector {
    pub fn new(scenes: impl IntoIterator<Item = SyntheticScene>, noise: NoiseSpec) -> Self {
        Self {
            scenes: scenes.into_iter().map(|s| (s.image_id.clone(), s)).collect(),
            noise,
        }
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn scene(&self, image_id: &str) -> Option<&SyntheticScene> {
        self.scenes.get(image_id)
    }
}

impl Detector for SyntheticDetector {
    fn id(&self) -> String {
        "synthetic".into()
    }

    fn propose(&self, request: &DetectionRequest) -> Result<DetectionResponse> {
        let scene = self
            .scenes
            .get(&request.image_id)
            .ok_or_else(|| Error::Usage(format!("no synthetic scene for image {}", request.image_id)))?;
        Ok(synthetic_detect(scene, &request.prompt, &self.noise))
    }
}
