//! MAE / RMSE reports for the trained counter and for detector-only
//! counting baselines.

use serde::{Deserialize, Serialize};

use crate::counter::Counter;
use crate::dataset::CountingRecord;
use crate::detector::{DetectionRequest, Detector};
use crate::error::{Error, Result};
use crate::exemplar::filter_single_object;
use crate::filter::PatchClassifier;
use crate::train::{predict_counts, CounterItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub image_id: String,
    pub gt_count: f64,
    pub pred_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mode: String,
    pub per_image: Vec<ImageCount>,
    pub mae: f64,
    pub rmse: f64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_counts(split: &str, mode: &str, per_image: Vec<ImageCount>, config_hash: &str) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Config(format!("cannot evaluate the empty split {split:?}")));
        }
        let (mae, rmse) = mae_rmse(per_image.iter().map(|c| (c.gt_count, c.pred_count)));
        Ok(Self {
            split: split.to_string(),
            mode: mode.to_string(),
            per_image,
            mae,
            rmse,
            config_hash: config_hash.to_string(),
        })
    }

    /// Tab-separated per-image table followed by the aggregate line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("image\tgt\tpred\n");
        for c in &self.per_image {
            s.push_str(&format!("{}\t{}\t{:.3}\n", c.image_id, c.gt_count, c.pred_count));
        }
        s.push_str(&format!(
            "# split={} mode={} n={} MAE={:.4} RMSE={:.4} config={}\n",
            self.split,
            self.mode,
            self.per_image.len(),
            self.mae,
            self.rmse,
            self.config_hash
        ));
        s
    }
}

/// `(mean |gt - pred|, sqrt(mean (gt - pred)^2))`; zeros for no pairs.
pub fn mae_rmse(pairs: impl IntoIterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut n, mut abs, mut sq) = (0usize, 0.0, 0.0);
    for (gt, pred) in pairs {
        let e = gt - pred;
        n += 1;
        abs += e.abs();
        sq += e * e;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (abs / n as f64, (sq / n as f64).sqrt())
}

/// Counter predictions from the positive exemplar stream.
pub fn evaluate_counter(counter: &Counter, items: &[CounterItem], split: &str, config_hash: &str) -> Result<EvalReport> {
    let preds = predict_counts(counter, items)?;
    let per_image = items
        .iter()
        .zip(preds)
        .map(|(it, pred_count)| ImageCount {
            image_id: it.image_id.clone(),
            gt_count: it.gt_count,
            pred_count,
        })
        .collect();
    EvalReport::from_counts(split, "counter", per_image, config_hash)
}

/// Baseline: count = number of class-prompt boxes at `tau_l`, optionally
/// after single-object filtering.
pub fn evaluate_detect_count(
    records: &[CountingRecord],
    detector: &dyn Detector,
    classifier: Option<&dyn PatchClassifier>,
    tau_l: f64,
    split: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let mut per_image = Vec::with_capacity(records.len());
    for r in records {
        let boxes = detector
            .detect(&DetectionRequest::for_record(r, &r.class_name, tau_l))?
            .boxes;
        let pred = match classifier {
            Some(c) => filter_single_object(&boxes, &*r.image.load()?, c)?.kept.len(),
            None => boxes.len(),
        };
        per_image.push(ImageCount {
            image_id: r.image_id.clone(),
            gt_count: r.count() as f64,
            pred_count: pred as f64,
        });
    }
    let mode = if classifier.is_some() { "detect-count+filter" } else { "detect-count" };
    EvalReport::from_counts(split, mode, per_image, config_hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(mae_rmse([(3.0, 3.0), (5.0, 5.0)]), (0.0, 0.0));
        let (mae, rmse) = mae_rmse([(10.0, 7.0), (2.0, 6.0)]);
        assert_eq!(mae, 3.5);
        assert!((rmse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(rmse >= mae);
    }

    #[test]
    fn empty_split_is_a_config_error() {
        assert!(matches!(EvalReport::from_counts("test", "counter", vec![], "h"), Err(Error::Config(_))));
    }
}
