use std::sync::OnceLock;

use zsc_core::counter::{Counter, CounterConfig};
use zsc_core::eval::evaluate_counter;
use zsc_core::experiment::{ExperimentConfig, RunResult, Workbench};
use zsc_core::imaging;
use zsc_core::sweep::{run_sweep, SweepParam};
use zsc_core::synthetic::{generate_scene, SyntheticSpec};
use zsc_core::train::{mann_kendall, LossMode, TrainConfig};

/// The desk preset with the density loss only, on the benchmark split.
fn trained() -> &'static (Workbench, RunResult) {
    static RUN: OnceLock<(Workbench, RunResult)> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut config = ExperimentConfig::desk(SyntheticSpec::benchmark());
        config.train.loss = LossMode::DensityOnly;
        let bench = Workbench::new(config).unwrap();
        let run = bench.run(&bench.config.train).unwrap();
        (bench, run)
    })
}

/// Small and fast: tiny counter, no augmentation, no filter.
fn quick_bench() -> Workbench {
    let mut config = ExperimentConfig::desk(SyntheticSpec::simple(3, 4, [3, 6]));
    config.use_filter = false;
    config.train = TrainConfig {
        epochs: 2,
        batch_size: 2,
        augment: false,
        repeats: 1,
        counter: CounterConfig::tiny(),
        ..TrainConfig::desk()
    };
    Workbench::new(config).unwrap()
}

#[test]
fn density_only_curve_trends_down() {
    let (_, run) = trained();
    let l_d: Vec<f64> = run.outcome.epochs.iter().map(|e| e.loss.l_d).collect();
    assert_eq!(l_d.len(), 20);
    let mk = mann_kendall(&l_d);
    assert!(mk.decreasing(0.05), "l_d {l_d:?}, trend {mk:?}");
}

#[test]
fn trained_model_counts_five_blobs() {
    let (bench, run) = trained();
    let mut spec = bench.config.spec.clone();
    spec.count_range = [5, 5];
    let class = spec.classes[0].clone();
    let scene = generate_scene(&spec, &class, "five-blobs", 4242).unwrap();
    assert_eq!(scene.targets().count(), 5);
    let image = scene.render();
    let exemplar = imaging::crop(&image, &scene.objects[0].bbox()).unwrap();
    let count = run.outcome.checkpoint.counter.forward(&image, &[exemplar]).unwrap().count();
    assert!((count - 5.0).abs() <= 1.0, "predicted {count}");
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let bench = quick_bench();
    let train = TrainConfig { learning_rate: 0.0, epochs: 1, ..bench.config.train.clone() };
    let run = bench.run(&train).unwrap();
    let init = Counter::new(train.counter.clone()).unwrap();
    assert_eq!(run.outcome.checkpoint.counter.params, init.params);
}

#[test]
fn same_seed_same_checkpoint() {
    let bench = quick_bench();
    let a = bench.run(&bench.config.train).unwrap().outcome.checkpoint.to_bytes();
    let b = bench.run(&bench.config.train).unwrap().outcome.checkpoint.to_bytes();
    assert_eq!(a, b);
    let other = TrainConfig { seed: 1, ..bench.config.train.clone() };
    assert_ne!(a, bench.run(&other).unwrap().outcome.checkpoint.to_bytes());
}

#[test]
fn single_value_sweep_matches_evaluation() {
    let bench = quick_bench();
    let table = run_sweep(&bench, SweepParam::TauIou, &[0.5], &bench.config.train, |_| {}).unwrap();
    assert_eq!(table.rows.len(), 1);
    let row = &table.rows[0];

    let mut train = bench.config.train.clone();
    train.pipeline.tau_iou = 0.5;
    let run = bench.run(&train).unwrap();
    let model = &run.outcome.checkpoint.counter;
    let items = |records| {
        let pairs = bench.mine(records, &train.pipeline).unwrap();
        bench.items(model, records, &pairs, &TrainConfig { loss: LossMode::DensityOnly, ..train.clone() }).unwrap()
    };
    let hash = &run.outcome.checkpoint.config_hash;
    let val = evaluate_counter(model, &items(&bench.split.val), "val", hash).unwrap();
    let test = evaluate_counter(model, &items(&bench.split.test), "test", hash).unwrap();
    assert_eq!((row.val_mae, row.val_rmse), (val.mae, val.rmse));
    assert_eq!((row.test_mae, row.test_rmse), (test.mae, test.rmse));
    assert_eq!(&row.config_hash, hash);
}
