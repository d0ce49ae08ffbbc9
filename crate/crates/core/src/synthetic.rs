//! Seeded synthetic counting scenes: colored shapes on a noisy background,
//! with dot annotations at object centers, annotated exemplar boxes and the
//! ground-truth object tables used by the synthetic detector.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassSplit, CountingRecord, ImageSource};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

impl ShapeKind {
    /// Membership test in unit coordinates relative to the object's center
    /// and radius.
    pub fn covers(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.9 && v.abs() <= 0.9,
            ShapeKind::Triangle => (-0.95..=0.9).contains(&v) && u.abs() <= 0.95 * (v + 0.95) / 1.85,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Ring => (0.25..=1.0).contains(&(u * u + v * v)),
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    /// Overrides `images_per_class`.
    #[serde(default)]
    pub images: Option<usize>,
}

/// Generation parameters; read from the synthetic-spec JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_canvas")]
    pub canvas: usize,
    pub classes: Vec<ClassSpec>,
    #[serde(default = "default_images_per_class")]
    pub images_per_class: usize,
    pub count_range: [usize; 2],
    #[serde(default = "default_radius_range")]
    pub radius_range: [f64; 2],
    /// Expected distractor objects per target object.
    #[serde(default)]
    pub distractor_rate: f64,
    /// Classes that only ever appear as distractors.
    #[serde(default)]
    pub distractor_classes: Vec<ClassSpec>,
    #[serde(default)]
    pub split: Option<ClassSplit>,
}

fn default_canvas() -> usize {
    64
}

fn default_images_per_class() -> usize {
    10
}

fn default_radius_range() -> [f64; 2] {
    [3.5, 5.0]
}

impl SyntheticSpec {
    /// Palette used by the tests and the CLI defaults.
    pub fn palette() -> Vec<ClassSpec> {
        let c = |name: &str, shape, color| ClassSpec {
            name: name.into(),
            shape,
            color,
            images: None,
        };
        vec![
            c("circle", ShapeKind::Circle, [235, 90, 70]),
            c("square", ShapeKind::Square, [80, 170, 240]),
            c("triangle", ShapeKind::Triangle, [120, 220, 90]),
            c("diamond", ShapeKind::Diamond, [240, 210, 70]),
            c("ring", ShapeKind::Ring, [200, 110, 230]),
            c("cross", ShapeKind::Cross, [90, 225, 210]),
        ]
    }

    /// `n` palette classes with `images` images each.
    pub fn simple(n_classes: usize, images: usize, count_range: [usize; 2]) -> Self {
        Self {
            canvas: default_canvas(),
            classes: Self::palette().into_iter().cycle().take(n_classes).collect(),
            images_per_class: images,
            count_range,
            radius_range: default_radius_range(),
            distractor_rate: 0.0,
            distractor_classes: Vec::new(),
            split: None,
        }
    }

    /// Three classes, one per split part: 30 train, 10 val and 10 test
    /// images with 3-12 objects each.
    pub fn benchmark() -> Self {
        let mut spec = Self::simple(3, 10, [3, 12]);
        spec.classes[0].images = Some(30);
        let name = |i: usize| vec![spec.classes[i].name.clone()];
        spec.split = Some(ClassSplit { train: name(0), val: name(1), test: name(2) });
        spec
    }

    /// Distractor-heavy variant: four training classes (circle, diamond,
    /// ring, cross; 8 images each) that clutter each other's scenes, square
    /// for val and triangle for test (10 images each), cluttered by the
    /// training classes. `rate` distractors per target object.
    pub fn cluttered_benchmark(rate: f64) -> Self {
        let mut spec = Self::simple(6, 10, [3, 12]);
        let names: Vec<String> = spec.classes.iter().map(|c| c.name.clone()).collect();
        for c in &mut spec.classes {
            if !matches!(c.name.as_str(), "square" | "triangle") {
                c.images = Some(8);
            }
        }
        spec.distractor_rate = rate;
        spec.split = Some(ClassSplit {
            train: vec![names[0].clone(), names[3].clone(), names[4].clone(), names[5].clone()],
            val: vec![names[1].clone()],
            test: vec![names[2].clone()],
        });
        spec
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 3 {
            return Err(Error::Config(format!(
                "synthetic spec needs at least 3 classes, got {}",
                self.classes.len()
            )));
        }
        let [lo, hi] = self.count_range;
        if lo > hi {
            return Err(Error::Config(format!("count range {lo}..{hi} is empty")));
        }
        let [r0, r1] = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config(format!("bad radius range {r0}..{r1}")));
        }
        if !(self.distractor_rate >= 0.0 && self.distractor_rate.is_finite()) {
            return Err(Error::Config("distractor_rate must be >= 0".into()));
        }
        if self.canvas < 16 || self.canvas % 16 != 0 {
            return Err(Error::Config(format!("canvas {} must be a positive multiple of 16", self.canvas)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_name: String,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    pub center: (f64, f64),
    pub radius: f64,
    pub distractor: bool,
}

impl SceneObject {
    /// Tight box around the object's extent.
    pub fn bbox(&self) -> BBox {
        BBox::around(self.center.0, self.center.1, self.radius).expect("positive radius")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub target_class: String,
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    pub fn targets(&self) -> impl Iterator<Item = &SceneObject> {
        self.objects.iter().filter(|o| !o.distractor)
    }

    pub fn render(&self) -> RgbImage {
        render_scene(self)
    }
}

pub fn render_scene(scene: &SyntheticScene) -> RgbImage {
    let mut rng = rng::stream(scene.seed, &[rng::hash_str("background")]);
    let (w, h) = (scene.width as u32, scene.height as u32);
    let mut img = RgbImage::from_fn(w, h, |_, _| {
        let n: i32 = rng.random_range(-10..=10);
        let v = (32 + n) as u8;
        Rgb([v, v, v.saturating_add(4)])
    });
    const SUB: usize = 4;
    for obj in &scene.objects {
        let (cx, cy) = obj.center;
        let r = obj.radius;
        let x0 = (cx - r - 1.0).floor().max(0.0) as u32;
        let y0 = (cy - r - 1.0).floor().max(0.0) as u32;
        let x1 = ((cx + r + 1.0).ceil() as u32).min(w);
        let y1 = ((cy + r + 1.0).ceil() as u32).min(h);
        for py in y0..y1 {
            for px in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let x = px as f64 + (sx as f64 + 0.5) / SUB as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SUB as f64;
                        hits += obj.shape.covers((x - cx) / r, (y - cy) / r) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f64 / (SUB * SUB) as f64;
                let p = img.get_pixel_mut(px, py);
                for c in 0..3 {
                    p.0[c] = (p.0[c] as f64 * (1.0 - a) + obj.color[c] as f64 * a).round() as u8;
                }
            }
        }
    }
    img
}

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;
const MIN_GAP: f64 = 2.0;
const EXEMPLARS_PER_RECORD: usize = 3;

fn place(
    rng: &mut impl Rng,
    placed: &[SceneObject],
    radius: f64,
    canvas: f64,
) -> Option<(f64, f64)> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let lo = radius + 1.0;
        let hi = canvas - radius - 1.0;
        if lo >= hi {
            return None;
        }
        let c = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let clear = placed.iter().all(|o| {
            let d = ((o.center.0 - c.0).powi(2) + (o.center.1 - c.1).powi(2)).sqrt();
            d >= o.radius + radius + MIN_GAP
        });
        if clear {
            return Some(c);
        }
    }
    None
}

fn jitter_color(rng: &mut impl Rng, base: [u8; 3]) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.random_range(-12..=12)).clamp(0, 255) as u8)
}

/// Classes that may appear as distractors next to `target`. With a fixed
/// split a class qualifies if it shares the target's part or is a training
/// class, so held-out classes never show up in training scenes (nor in each
/// other's); dedicated distractor classes are always eligible.
fn distractor_pool<'a>(spec: &'a SyntheticSpec, target: &ClassSpec) -> Vec<&'a ClassSpec> {
    let eligible = |name: &str| match &spec.split {
        None => true,
        Some(split) => {
            split.train.iter().any(|c| c == name)
                || [&split.val, &split.test]
                    .into_iter()
                    .any(|part| part.contains(&target.name) && part.iter().any(|c| c == name))
        }
    };
    spec.classes
        .iter()
        .filter(|c| c.name != target.name && eligible(&c.name))
        .chain(&spec.distractor_classes)
        .collect()
}

/// Generate one scene of `target` class objects plus distractors.
pub fn generate_scene(
    spec: &SyntheticSpec,
    target: &ClassSpec,
    image_id: &str,
    seed: u64,
) -> Result<SyntheticScene> {
    let mut rng = rng::stream(seed, &[rng::hash_str("layout")]);
    let canvas = spec.canvas as f64;
    let count = rng.random_range(spec.count_range[0]..=spec.count_range[1]);
    let n_distractors = {
        let expected = spec.distractor_rate * count as f64;
        let base = expected.floor();
        base as usize + rng.random_bool((expected - base).clamp(0.0, 1.0)) as usize
    };
    let distractor_pool = distractor_pool(spec, target);
    if n_distractors > 0 && distractor_pool.is_empty() {
        return Err(Error::Config(format!(
            "no distractor classes available for {} (add distractor_classes)",
            target.name
        )));
    }

    let mut objects: Vec<SceneObject> = Vec::with_capacity(count + n_distractors);
    for i in 0..count + n_distractors {
        let distractor = i >= count;
        let class = if distractor {
            distractor_pool[rng.random_range(0..distractor_pool.len())]
        } else {
            target
        };
        let radius = rng.random_range(spec.radius_range[0]..=spec.radius_range[1]);
        let center = place(&mut rng, &objects, radius, canvas).ok_or_else(|| {
            Error::Generation(format!(
                "cannot pack {} objects of radius up to {} on a {}px canvas ({image_id})",
                count + n_distractors,
                spec.radius_range[1],
                spec.canvas
            ))
        })?;
        objects.push(SceneObject {
            class_name: class.name.clone(),
            shape: class.shape,
            color: jitter_color(&mut rng, class.color),
            center,
            radius,
            distractor,
        });
    }
    Ok(SyntheticScene {
        image_id: image_id.to_string(),
        width: spec.canvas,
        height: spec.canvas,
        seed,
        target_class: target.name.clone(),
        objects,
    })
}

/// Record view of a scene: dots at target centers, the first three targets
/// as annotated exemplars.
pub fn scene_record(scene: &SyntheticScene, image: Arc<RgbImage>) -> CountingRecord {
    let targets: Vec<&SceneObject> = scene.targets().collect();
    CountingRecord {
        image_id: scene.image_id.clone(),
        image: ImageSource::Memory(image),
        width: scene.width,
        height: scene.height,
        class_name: scene.target_class.clone(),
        points: targets.iter().map(|o| o.center).collect(),
        exemplar_boxes: targets
            .iter()
            .take(EXEMPLARS_PER_RECORD)
            .filter_map(|o| o.bbox().clip(scene.width as f64, scene.height as f64))
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<CountingRecord>,
    pub scenes: Vec<SyntheticScene>,
}

/// Scene descriptions stored next to a written synthetic dataset, so the
/// synthetic detector can run on it later.
pub const SCENES_FILE: &str = "scenes.json";

impl SyntheticDataset {
    pub fn scene_map(&self) -> BTreeMap<String, SyntheticScene> {
        self.scenes.iter().map(|s| (s.image_id.clone(), s.clone())).collect()
    }

    /// Images, annotations, class map, scenes and the class split.
    pub fn write(&self, dir: &Path, split: &ClassSplit) -> Result<()> {
        crate::dataset::write_dataset(dir, &self.records)?;
        crate::dataset::write_split(dir, split)?;
        crate::dataset::write_file(&dir.join(SCENES_FILE), serde_json::to_string(&self.scenes)?.as_bytes())
    }
}

pub fn read_scenes(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let path = dir.join(SCENES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pure function of `(spec, seed)`.
pub fn synthesize_dataset(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut scenes = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        let n = class.images.unwrap_or(spec.images_per_class);
        for i in 0..n {
            let image_id = format!("{}_{:04}.png", class.name.replace(char::is_whitespace, "_"), i);
            let scene_seed = rng::derive_seed(seed, &[ci as u64, i as u64]);
            let scene = generate_scene(spec, class, &image_id, scene_seed)?;
            let image = Arc::new(scene.render());
            records.push(scene_record(&scene, image));
            scenes.push(scene);
        }
    }
    Ok(SyntheticDataset { records, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_post_check() {
        let spec = SyntheticSpec::simple(3, 10, [3, 12]);
        let ds = synthesize_dataset(&spec, 11).unwrap();
        assert_eq!(ds.records.len(), 30);
        for (r, s) in ds.records.iter().zip(&ds.scenes) {
            assert!((3..=12).contains(&r.count()));
            assert!(s.objects.iter().all(|o| o.class_name == r.class_name && !o.distractor));
            assert_eq!(r.exemplar_boxes.len(), 3);
            for o in &s.objects {
                let b = o.bbox();
                assert!(b.x_min() >= 0.0 && b.y_min() >= 0.0);
                assert!(b.x_max() <= 64.0 && b.y_max() <= 64.0);
            }
        }
    }

    #[test]
    fn deterministic_images() {
        let spec = SyntheticSpec::simple(3, 2, [3, 6]);
        let a = synthesize_dataset(&spec, 5).unwrap();
        let b = synthesize_dataset(&spec, 5).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            let (ia, ib) = (ra.image.load().unwrap(), rb.image.load().unwrap());
            assert_eq!(ia.as_raw(), ib.as_raw());
        }
        assert_eq!(a.scenes, b.scenes);
        let c = synthesize_dataset(&spec, 6).unwrap();
        assert_ne!(a.scenes, c.scenes);
    }

    #[test]
    fn distractors_present_when_requested() {
        let mut spec = SyntheticSpec::simple(3, 4, [4, 8]);
        spec.distractor_rate = 0.5;
        let ds = synthesize_dataset(&spec, 2).unwrap();
        let total: usize = ds
            .scenes
            .iter()
            .map(|s| s.objects.iter().filter(|o| o.distractor).count())
            .sum();
        assert!(total > 0);
        for s in &ds.scenes {
            for o in s.objects.iter().filter(|o| o.distractor) {
                assert_ne!(o.class_name, s.target_class);
            }
        }
    }

    #[test]
    fn held_out_classes_never_appear_as_training_distractors() {
        let spec = SyntheticSpec::cluttered_benchmark(0.5);
        let split = spec.split.clone().unwrap();
        let ds = synthesize_dataset(&spec, 5).unwrap();
        let mut seen = [0; 2];
        for s in &ds.scenes {
            let held_out = !split.train.contains(&s.target_class);
            for o in s.objects.iter().filter(|o| o.distractor) {
                assert!(split.train.contains(&o.class_name), "{} in {}", o.class_name, s.image_id);
                seen[held_out as usize] += 1;
            }
        }
        assert!(seen[0] > 0 && seen[1] > 0);

        let mut spec = SyntheticSpec::benchmark();
        spec.distractor_rate = 1.0;
        assert!(matches!(synthesize_dataset(&spec, 5), Err(Error::Config(_))));
    }

    #[test]
    fn infeasible_packing_errors() {
        let mut spec = SyntheticSpec::simple(3, 1, [80, 80]);
        spec.radius_range = [6.0, 6.0];
        assert!(matches!(synthesize_dataset(&spec, 0), Err(Error::Generation(_))));
    }
}
