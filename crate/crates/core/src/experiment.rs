//! End-to-end runs on synthetic data: generate, split by class, train the
//! single-object filter on the training classes, mine exemplars for every
//! image, fine-tune the counter and evaluate on val and test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::counter::Counter;
use crate::dataset::{split_by_class, CountingRecord, DatasetSplit};
use crate::detector::{NoiseSpec, SyntheticDetector};
use crate::error::{Error, Result};
use crate::eval::{evaluate_counter, evaluate_detect_count, EvalReport};
use crate::exemplar::{ExemplarEntry, ExemplarPair, ExemplarPipeline, PipelineConfig};
use crate::filter::{
    build_training_set, train_filter, CurationConfig, DeskBackbone, FilterReport, FilterTrainConfig, PatchClassifier,
    SingleObjectFilter,
};
use crate::synthetic::{synthesize_dataset, SyntheticDataset, SyntheticSpec};
use crate::train::{config_hash, train_counter, CounterItem, LossMode, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: SyntheticSpec,
    pub data_seed: u64,
    /// Class split ratios when the spec does not fix the split.
    pub split_ratios: [f64; 3],
    pub noise: NoiseSpec,
    /// Run the single-object filter inside exemplar mining.
    pub use_filter: bool,
    pub curation: CurationConfig,
    pub filter: FilterTrainConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn desk(spec: SyntheticSpec) -> Self {
        Self {
            spec,
            data_seed: 0,
            split_ratios: [0.6, 0.2, 0.2],
            noise: NoiseSpec::none(),
            use_filter: true,
            curation: CurationConfig::default(),
            filter: FilterTrainConfig::desk(),
            train: TrainConfig::desk(),
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Data, detector and filter shared by every training run of an
/// experiment.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub dataset: SyntheticDataset,
    pub split: DatasetSplit,
    pub detector: SyntheticDetector,
    pub filter: Option<(SingleObjectFilter, FilterReport)>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub train: EvalReport,
    pub val: EvalReport,
    pub test: EvalReport,
}

impl Workbench {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let dataset = synthesize_dataset(&config.spec, config.data_seed)?;
        let split = match &config.spec.split {
            Some(classes) => DatasetSplit::from_classes(&dataset.records, classes.clone())?,
            None => split_by_class(&dataset.records, config.split_ratios, config.data_seed)?,
        };
        let detector = SyntheticDetector::new(dataset.scenes.iter().cloned(), config.noise.clone());
        let filter = if config.use_filter {
            let patches = build_training_set(&split.train, &config.curation, config.filter.seed)?;
            let backbone = DeskBackbone::new(config.filter.seed);
            let report = train_filter(&patches, &backbone, &config.filter)?;
            log::info!(
                "filter: train acc {:.3}, eval acc {:?}",
                report.train_accuracy,
                report.eval_accuracy
            );
            Some((SingleObjectFilter::desk(report.head.clone())?, report))
        } else {
            None
        };
        Ok(Self { config, dataset, split, detector, filter })
    }

    pub fn classifier(&self) -> Option<&dyn PatchClassifier> {
        self.filter.as_ref().map(|(f, _)| f as &dyn PatchClassifier)
    }

    pub fn mine(&self, records: &[CountingRecord], pipeline: &PipelineConfig) -> Result<Vec<ExemplarPair>> {
        let p = ExemplarPipeline::new(&self.detector, self.classifier(), pipeline.clone())?;
        records.iter().map(|r| p.build(r)).collect()
    }

    pub fn items(
        &self,
        counter: &Counter,
        records: &[CountingRecord],
        pairs: &[ExemplarPair],
        train: &TrainConfig,
    ) -> Result<Vec<CounterItem>> {
        counter_items(counter, records, pairs, train.sigma, train.loss)
    }

    /// Mine exemplars for all parts with `train.pipeline`, train, evaluate.
    pub fn run(&self, train: &TrainConfig) -> Result<RunResult> {
        let counter = Counter::new(train.counter.clone())?;
        let parts = [&self.split.train, &self.split.val, &self.split.test];
        let mut items = Vec::with_capacity(3);
        for (i, records) in parts.into_iter().enumerate() {
            let pairs = self.mine(records, &train.pipeline)?;
            // Negatives only matter for the training loss.
            let loss = if i == 0 { train.loss } else { LossMode::DensityOnly };
            items.push(self.items(&counter, records, &pairs, &TrainConfig { loss, ..train.clone() })?);
        }
        let outcome = train_counter(&items[0], &items[1], train)?;
        let hash = &outcome.checkpoint.config_hash;
        let model = &outcome.checkpoint.counter;
        let train_report = evaluate_counter(model, &items[0], "train", hash)?;
        let val = evaluate_counter(model, &items[1], "val", hash)?;
        let test = evaluate_counter(model, &items[2], "test", hash)?;
        Ok(RunResult { outcome, train: train_report, val, test })
    }

    pub fn detect_count(&self, records: &[CountingRecord], with_filter: bool) -> Result<EvalReport> {
        let classifier = if with_filter { self.classifier() } else { None };
        evaluate_detect_count(
            records,
            &self.detector,
            classifier,
            self.config.train.pipeline.tau_l,
            "test",
            &self.config.hash(),
        )
    }
}

/// One item per record, matched to its exemplar pair by image id.
pub fn counter_items(
    counter: &Counter,
    records: &[CountingRecord],
    pairs: &[ExemplarPair],
    sigma: f64,
    loss: LossMode,
) -> Result<Vec<CounterItem>> {
    let by_id: BTreeMap<&str, &ExemplarPair> = pairs.iter().map(|p| (p.image_id.as_str(), p)).collect();
    records
        .iter()
        .map(|r| {
            let pair = by_id
                .get(r.image_id.as_str())
                .ok_or_else(|| Error::Config(format!("no exemplars for {}", r.image_id)))?;
            CounterItem::new(counter, r, &*r.image.load()?, pair, sigma, loss)
        })
        .collect()
}

/// Rebuild exemplar pairs for `records` from cache entries.
pub fn pairs_from_cache(entries: &[ExemplarEntry], records: &[CountingRecord], side: u32) -> Result<Vec<ExemplarPair>> {
    let by_id: BTreeMap<&str, &ExemplarEntry> = entries.iter().map(|e| (e.image.as_str(), e)).collect();
    records
        .iter()
        .map(|r| {
            let entry = by_id
                .get(r.image_id.as_str())
                .ok_or_else(|| Error::Config(format!("exemplar cache has no entry for {}", r.image_id)))?;
            ExemplarPair::from_entry(entry, &*r.image.load()?, side)
        })
        .collect()
}

/// MAE of predicting the training-set mean count for every image.
pub fn constant_mean_mae(train: &[CountingRecord], test: &[CountingRecord]) -> f64 {
    let mean = train.iter().map(|r| r.count() as f64).sum::<f64>() / train.len().max(1) as f64;
    crate::eval::mae_rmse(test.iter().map(|r| (r.count() as f64, mean))).0
}
