//! Axis-aligned box algebra: IoU and the negative-candidate deduplication rule.
//!
//! Boxes are continuous half-open rectangles in pixel coordinates with the
//! origin at the top-left corner. IoU is computed from areas, never by
//! rasterizing.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x_min, y_min, x_max, y_max]` with positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Geometry(format!("non-finite box {coords:?}")));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Geometry(format!(
                "degenerate or inverted box {coords:?}"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Square box of half-side `half` around a center point.
    pub fn around(cx: f64, cy: f64, half: f64) -> Result<Self> {
        Self::new(cx - half, cy - half, cx + half, cy + half)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn xyxy(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Half-open containment: `x_min <= x < x_max`.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Smallest box covering both.
    pub fn union_box(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    /// Clip to `[0, width] x [0, height]`. `None` when nothing of positive
    /// area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.xyxy()
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, exactly 1 for identical
/// boxes and 0 for disjoint ones.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A detector proposal: box, confidence in `[0, 1]` and the prompt that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub logit: f64,
    pub source_prompt: String,
}

impl ScoredBox {
    pub fn new(bbox: BBox, logit: f64, source_prompt: impl Into<String>) -> Result<Self> {
        if !logit.is_finite() || !(0.0..=1.0).contains(&logit) {
            return Err(Error::Geometry(format!("logit {logit} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            logit,
            source_prompt: source_prompt.into(),
        })
    }
}

/// Total order used for every ranking of proposals: logit descending, then
/// area descending. Combined with a stable sort, insertion order breaks the
/// remaining ties.
pub fn rank_cmp(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.logit
        .total_cmp(&a.logit)
        .then_with(|| b.bbox.area().total_cmp(&a.bbox.area()))
}

/// Stable sort by [`rank_cmp`].
pub fn sort_ranked(boxes: &mut [ScoredBox]) {
    boxes.sort_by(rank_cmp);
}

/// Keeps a negative only if its IoU with every positive is strictly below
/// `tau_iou`. Input order is preserved; an IoU equal to the threshold counts
/// as overlap.
///
/// `positives` are the threshold-filtered positive candidates, before any
/// single-object filtering.
pub fn dedup_negatives(
    negatives: &[ScoredBox],
    positives: &[ScoredBox],
    tau_iou: f64,
) -> Vec<ScoredBox> {
    assert!(
        tau_iou > 0.0 && tau_iou <= 1.0,
        "tau_iou must lie in (0, 1], got {tau_iou}"
    );
    negatives
        .iter()
        .filter(|n| positives.iter().all(|p| iou(&n.bbox, &p.bbox) < tau_iou))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn sb(bbox: BBox, logit: f64) -> ScoredBox {
        ScoredBox::new(bbox, logit, "object").unwrap()
    }

    /// Fraction of a fine sample grid covered by both / either box.
    fn rasterized_iou(a: &BBox, b: &BBox, steps: usize) -> f64 {
        let (x0, y0) = (a.x_min().min(b.x_min()), a.y_min().min(b.y_min()));
        let (x1, y1) = (a.x_max().max(b.x_max()), a.y_max().max(b.y_max()));
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..steps {
            for j in 0..steps {
                let x = x0 + (j as f64 + 0.5) * (x1 - x0) / steps as f64;
                let y = y0 + (i as f64 + 0.5) * (y1 - y0) / steps as f64;
                let (ia, ib) = (a.contains_point(x, y), b.contains_point(x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = b(3.0, 4.0, 9.5, 11.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 2.0, 3.0, 3.0)), 0.0);
        // touching edges share no area
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn iou_matches_raster_oracle() {
        let (a, c) = (b(0.0, 0.0, 2.0, 2.0), b(1.0, 1.0, 3.0, 3.0));
        let oracle = rasterized_iou(&a, &c, 600);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9);
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[10, 0, 0, 10]").is_err());
        assert!(ScoredBox::new(b(0.0, 0.0, 1.0, 1.0), 1.3, "x").is_err());
    }

    #[test]
    fn dedup_examples() {
        let n = sb(b(0.0, 0.0, 4.0, 4.0), 0.7);
        assert!(dedup_negatives(&[n.clone()], &[n.clone()], 0.5).is_empty());
        let far = sb(b(20.0, 20.0, 24.0, 24.0), 0.4);
        for tau in [0.01, 0.5, 1.0] {
            assert_eq!(dedup_negatives(&[far.clone()], &[n.clone()], tau), vec![far.clone()]);
        }
        assert_eq!(dedup_negatives(&[n.clone(), far.clone()], &[], 0.5).len(), 2);
    }

    #[test]
    fn dedup_tie_counts_as_overlap() {
        // IoU exactly 1/2
        let p = sb(b(0.0, 0.0, 2.0, 1.0), 0.9);
        let n = sb(b(0.0, 0.0, 1.0, 1.0), 0.9);
        assert_eq!(iou(&p.bbox, &n.bbox), 0.5);
        assert!(dedup_negatives(&[n.clone()], &[p.clone()], 0.5).is_empty());
        assert_eq!(dedup_negatives(&[n], &[p], 0.5000001).len(), 1);
    }

    #[test]
    fn clip_and_union() {
        let a = b(-3.0, 5.0, 10.0, 70.0);
        assert_eq!(a.clip(64.0, 64.0).unwrap().xyxy(), [0.0, 5.0, 10.0, 64.0]);
        assert!(b(70.0, 0.0, 80.0, 5.0).clip(64.0, 64.0).is_none());
        let u = b(0.0, 0.0, 1.0, 1.0).union_box(&b(2.0, 3.0, 4.0, 5.0));
        assert_eq!(u.xyxy(), [0.0, 0.0, 4.0, 5.0]);
        assert!(u.contains(&b(0.5, 0.5, 1.0, 1.0)));
    }

    #[test]
    fn ranking_breaks_ties_by_area_then_index() {
        let mut v = vec![
            sb(b(0.0, 0.0, 2.0, 2.0), 0.5),
            sb(b(0.0, 0.0, 3.0, 3.0), 0.5),
            sb(b(5.0, 5.0, 6.0, 6.0), 0.5),
            sb(b(9.0, 9.0, 12.0, 12.0), 0.5),
        ];
        sort_ranked(&mut v);
        let areas: Vec<f64> = v.iter().map(|s| s.bbox.area()).collect();
        assert_eq!(areas, vec![9.0, 9.0, 4.0, 1.0]);
        assert_eq!(v[0].bbox.x_min(), 0.0);
        assert_eq!(v[1].bbox.x_min(), 9.0);
    }
}
