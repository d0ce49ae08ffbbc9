//! Counting records, FSC-147-style annotation ingestion and class-disjoint
//! splitting.
//!
//! On disk a dataset is a directory holding `images/`, an annotation file
//! `annotations.json` of the form
//! `{"<image>": {"points": [[x, y], ...], "box_examples": [[x1, y1, x2, y2], ...]}}`
//! and a class map with one `<image>\t<class>` pair per line.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::density::{generate_density_map, DensityMap};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const CLASS_MAP_FILE: &str = "classes.txt";
pub const IMAGES_DIR: &str = "images";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

impl ImageSource {
    pub fn load(&self) -> Result<Arc<RgbImage>> {
        match self {
            ImageSource::Memory(img) => Ok(Arc::clone(img)),
            ImageSource::Path(p) => Ok(Arc::new(imaging::load_rgb(p)?)),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            ImageSource::Path(p) => Some(p),
            ImageSource::Memory(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CountingRecord {
    pub image_id: String,
    pub image: ImageSource,
    pub width: usize,
    pub height: usize,
    pub class_name: String,
    pub points: Vec<(f64, f64)>,
    /// Annotated exemplars; training-set ground truth only.
    pub exemplar_boxes: Vec<BBox>,
}

impl CountingRecord {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn density(&self, sigma: f64, scale: f64) -> Result<DensityMap> {
        generate_density_map(&self.points, self.height, self.width, sigma, scale)
    }

    fn validate(&self) -> Result<()> {
        for &(x, y) in &self.points {
            let ok = (0.0..=self.width as f64).contains(&x) && (0.0..=self.height as f64).contains(&y);
            if !ok {
                return Err(Error::PointOutOfBounds {
                    x,
                    y,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub points: Vec<[f64; 2]>,
    #[serde(default)]
    pub box_examples: Vec<[f64; 4]>,
}

pub type AnnotationFile = BTreeMap<String, AnnotationEntry>;

/// Parse a class map: one `image<TAB or spaces>class` pair per line.
pub fn parse_class_map(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (image, class) = line
            .split_once('\t')
            .or_else(|| line.split_once(char::is_whitespace))
            .ok_or_else(|| Error::Config(format!("class map line {}: expected `image<TAB>class`", lineno + 1)))?;
        out.insert(image.trim().to_string(), class.trim().to_string());
    }
    Ok(out)
}

pub fn format_class_map(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(i, c)| format!("{i}\t{c}\n")).collect()
}

/// Read a dataset directory. `class_map` defaults to `<dir>/classes.txt`.
pub fn load_dataset(dir: &Path, class_map: Option<&Path>) -> Result<Vec<CountingRecord>> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let annotations: AnnotationFile = serde_json::from_str(&text)?;
    let cm_path = class_map.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CLASS_MAP_FILE));
    let cm_text = std::fs::read_to_string(&cm_path).map_err(|e| Error::io(&cm_path, e))?;
    let classes = parse_class_map(&cm_text)?;

    let mut records = Vec::with_capacity(annotations.len());
    for (image_id, entry) in annotations {
        let class_name = classes
            .get(&image_id)
            .ok_or_else(|| Error::Config(format!("image {image_id} missing from class map")))?
            .clone();
        let path = dir.join(IMAGES_DIR).join(&image_id);
        let (w, h) = image::image_dimensions(&path)?;
        let exemplar_boxes = entry
            .box_examples
            .iter()
            .filter_map(|b| BBox::try_from(*b).ok()?.clip(w as f64, h as f64))
            .collect();
        let record = CountingRecord {
            image_id,
            image: ImageSource::Path(path),
            width: w as usize,
            height: h as usize,
            class_name,
            points: entry.points.iter().map(|p| (p[0], p[1])).collect(),
            exemplar_boxes,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Write images, annotations and class map under `dir`.
pub fn write_dataset(dir: &Path, records: &[CountingRecord]) -> Result<()> {
    let mut annotations = AnnotationFile::new();
    let mut classes = BTreeMap::new();
    for r in records {
        let img = r.image.load()?;
        imaging::save_png(&img, &dir.join(IMAGES_DIR).join(&r.image_id))?;
        annotations.insert(
            r.image_id.clone(),
            AnnotationEntry {
                points: r.points.iter().map(|&(x, y)| [x, y]).collect(),
                box_examples: r.exemplar_boxes.iter().map(|b| b.xyxy()).collect(),
            },
        );
        classes.insert(r.image_id.clone(), r.class_name.clone());
    }
    write_file(&dir.join(ANNOTATIONS_FILE), serde_json::to_string_pretty(&annotations)?.as_bytes())?;
    write_file(&dir.join(CLASS_MAP_FILE), format_class_map(&classes).as_bytes())
}

pub fn write_split(dir: &Path, split: &ClassSplit) -> Result<()> {
    write_file(&dir.join(SPLIT_FILE), serde_json::to_string_pretty(split)?.as_bytes())
}

pub fn read_split(dir: &Path) -> Result<ClassSplit> {
    let path = dir.join(SPLIT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Class lists of a split; serialized as `split.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Config(format!("unknown split part {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub classes: ClassSplit,
    pub train: Vec<CountingRecord>,
    pub val: Vec<CountingRecord>,
    pub test: Vec<CountingRecord>,
}

impl DatasetSplit {
    /// Assign records according to explicit class lists, which must be
    /// pairwise disjoint. Records of unlisted classes are dropped.
    pub fn from_classes(records: &[CountingRecord], classes: ClassSplit) -> Result<Self> {
        let sets: Vec<BTreeSet<&String>> = [&classes.train, &classes.val, &classes.test]
            .iter()
            .map(|v| v.iter().collect())
            .collect();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            if let Some(c) = sets[i].intersection(&sets[j]).next() {
                return Err(Error::Config(format!("class {c:?} appears in two splits")));
            }
        }
        let pick = |set: &BTreeSet<&String>| -> Vec<CountingRecord> {
            records.iter().filter(|r| set.contains(&r.class_name)).cloned().collect()
        };
        Ok(Self {
            train: pick(&sets[0]),
            val: pick(&sets[1]),
            test: pick(&sets[2]),
            classes,
        })
    }

    pub fn part(&self, part: SplitPart) -> &[CountingRecord] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Partition the class set (not the images) by a seeded shuffle. Class
/// counts follow `ratios` with every split receiving at least one class.
pub fn split_by_class(records: &[CountingRecord], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let mut classes: Vec<String> = records
        .iter()
        .map(|r| r.class_name.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = classes.len();
    if n < 3 {
        return Err(Error::Config(format!("class-disjoint split needs at least 3 classes, found {n}")));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    classes.shuffle(&mut crate::rng::stream(seed, &[0x5711]));
    let total: f64 = ratios.iter().sum();
    let n_train = ((n as f64 * ratios[0] / total).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * ratios[1] / total).round() as usize).clamp(1, n - 1 - n_train);
    let test = classes.split_off(n_train + n_val);
    let val = classes.split_off(n_train);
    DatasetSplit::from_classes(
        records,
        ClassSplit {
            train: classes,
            val,
            test,
        },
    )
}
