use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use zsc_core::counter::{read_checkpoint, write_checkpoint, Counter};
use zsc_core::dataset::{load_dataset, read_split, split_by_class, CountingRecord, DatasetSplit, SplitPart};
use zsc_core::detector::{parse_detector_flag, Detector, DetectorChoice, ExternalDetector, NoiseSpec, SyntheticDetector};
use zsc_core::eval::{evaluate_counter, evaluate_detect_count, EvalReport};
use zsc_core::exemplar::{read_cache, write_cache, ExemplarPipeline, FallbackPolicy, PipelineConfig, PositiveFallback};
use zsc_core::experiment::{counter_items, pairs_from_cache, ExperimentConfig, Workbench};
use zsc_core::filter::{
    build_training_set, read_head, train_filter, write_head, CurationConfig, DeskBackbone, FilterTrainConfig,
    PatchClassifier, SingleObjectFilter,
};
use zsc_core::render::write_overlay;
use zsc_core::sweep::{run_sweep, SweepParam};
use zsc_core::synthetic::{read_scenes, synthesize_dataset, SyntheticSpec};
use zsc_core::train::{train_from, write_epoch_logs, LossMode, TrainConfig};

#[derive(Parser)]
#[command(name = "zsc", version, about = "Zero-shot counting with mined exemplars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with scenes and a class split.
    MakeSynthetic(MakeSynthetic),
    /// Mine positive/negative exemplars for every image into a cache.
    SelectExemplars(SelectExemplars),
    /// Train the single-object filter head on the training classes.
    TrainFilter(TrainFilter),
    /// Fine-tune the counter from an exemplar cache.
    TrainCounter(TrainCounterCmd),
    /// MAE/RMSE of the counter or of detector-only counting.
    Evaluate(Evaluate),
    /// Threshold sweep over tau_iou or tau_l on a synthetic experiment.
    Sweep(Sweep),
    /// Overlay a predicted density map on its image.
    Render(Render),
}

#[derive(Args)]
struct MakeSynthetic {
    #[arg(long)]
    out: PathBuf,
    /// Synthetic spec JSON; overrides the quick flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    images: usize,
    /// Inclusive object-count range, e.g. 3-12.
    #[arg(long, default_value = "3-12")]
    counts: String,
    #[arg(long, default_value_t = 0.0)]
    distractor_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DetectorArgs {
    /// `synthetic` or `external:<http-url|unix-socket-path>`.
    #[arg(long, default_value = "synthetic")]
    detector: String,
    /// Noise JSON for the synthetic detector.
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long)]
    merge_rate: Option<f64>,
    #[arg(long)]
    spurious: Option<usize>,
}

#[derive(Args)]
struct FilterArgs {
    /// Trained filter head; without it (or with --no-filter) no filtering.
    #[arg(long)]
    filter: Option<PathBuf>,
    #[arg(long)]
    no_filter: bool,
}

#[derive(Args)]
struct SelectExemplars {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    filter: FilterArgs,
    /// Pipeline config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau_l: Option<f64>,
    #[arg(long)]
    tau_iou: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    fallback: Option<Fallback>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fallback {
    Ladder,
    Strict,
}

#[derive(Args)]
struct TrainFilter {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Filter training config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON, merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Tuned for the CPU-sized synthetic data.
    Desk,
    /// Reference defaults (lr 1e-5, batch 8) for a pretrained backbone.
    Reference,
}

#[derive(Args)]
struct TrainCounterCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    exemplars: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    /// Per-epoch JSON-lines log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Counter,
    DetectCount,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value = "counter")]
    mode: Mode,
    /// Same as `--mode detect-count`.
    #[arg(long)]
    detector_only: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    exemplars: Option<PathBuf>,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, default_value_t = 0.02)]
    tau_l: f64,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    param: String,
    /// Comma-separated values; defaults to the standard grid.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Experiment config JSON, merged over the desk experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    image_id: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    exemplars: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip drawing the positive exemplar boxes.
    #[arg(long)]
    no_boxes: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::SelectExemplars(a) => select_exemplars(a),
        Command::TrainFilter(a) => train_filter_cmd(a),
        Command::TrainCounter(a) => train_counter_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Render(a) => render(a),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// `base` with the JSON file at `path`, if any, merged over it.
fn layered<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(base) };
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, read_json(path)?);
    serde_json::from_value(v).with_context(|| format!("invalid config {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_range(s: &str) -> Result<[usize; 2]> {
    let (a, b) = s.split_once('-').context("count range must look like LOW-HIGH")?;
    Ok([a.trim().parse()?, b.trim().parse()?])
}

fn make_synthetic(a: MakeSynthetic) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_value::<SyntheticSpec>(read_json(p)?)?,
        None => SyntheticSpec {
            distractor_rate: a.distractor_rate,
            ..SyntheticSpec::simple(a.classes, a.images, parse_range(&a.counts)?)
        },
    };
    let ds = synthesize_dataset(&spec, a.seed)?;
    let split = match &spec.split {
        Some(s) => s.clone(),
        None => split_by_class(&ds.records, [0.6, 0.2, 0.2], a.seed)?.classes,
    };
    ds.write(&a.out, &split)?;
    println!(
        "wrote {} images ({} train / {} val / {} test classes) to {}",
        ds.records.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let records = load_dataset(dir, None)?;
    Ok(DatasetSplit::from_classes(&records, read_split(dir)?)?)
}

fn build_detector(args: &DetectorArgs, data: &Path) -> Result<Box<dyn Detector>> {
    match parse_detector_flag(&args.detector)? {
        DetectorChoice::Synthetic => {
            let mut noise = match &args.noise {
                Some(p) => serde_json::from_value(read_json(p)?)?,
                None => NoiseSpec::none(),
            };
            if let Some(m) = args.merge_rate {
                noise.merge_rate = m;
            }
            if let Some(s) = args.spurious {
                noise.spurious = s;
            }
            let scenes = read_scenes(data).context("the synthetic detector needs scenes.json from make-synthetic")?;
            Ok(Box::new(SyntheticDetector::new(scenes, noise)))
        }
        DetectorChoice::External(endpoint) => Ok(Box::new(ExternalDetector::new(endpoint))),
    }
}

fn build_filter(args: &FilterArgs) -> Result<Option<SingleObjectFilter>> {
    match (&args.filter, args.no_filter) {
        (Some(path), false) => Ok(Some(SingleObjectFilter::desk(read_head(path)?)?)),
        _ => Ok(None),
    }
}

fn select_exemplars(a: SelectExemplars) -> Result<()> {
    let mut config: PipelineConfig = layered(PipelineConfig::default(), a.config.as_deref())?;
    if let Some(v) = a.tau_l {
        config.tau_l = v;
    }
    if let Some(v) = a.tau_iou {
        config.tau_iou = v;
    }
    if let Some(v) = a.k {
        config.k = v;
    }
    if let Some(f) = a.fallback {
        config.fallback = match f {
            Fallback::Ladder => FallbackPolicy::Ladder,
            Fallback::Strict => FallbackPolicy::Strict,
        };
    }
    let records = load_dataset(&a.data, None)?;
    let detector = build_detector(&a.detector, &a.data)?;
    let filter = build_filter(&a.filter)?;
    let pipeline = ExemplarPipeline::new(detector.as_ref(), filter.as_ref().map(|f| f as &dyn PatchClassifier), config)?;
    let pairs = records.iter().map(|r| pipeline.build(r)).collect::<zsc_core::Result<Vec<_>>>()?;
    write_cache(&a.out, &pairs)?;
    let fallbacks = pairs.iter().filter(|p| p.meta.positive_fallback != PositiveFallback::None).count();
    println!("cached exemplars for {} images ({} used a positive fallback) in {}", pairs.len(), fallbacks, a.out.display());
    Ok(())
}

fn train_filter_cmd(a: TrainFilter) -> Result<()> {
    let mut config: FilterTrainConfig = layered(FilterTrainConfig::desk(), a.config.as_deref())?;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let split = load_split(&a.data)?;
    let patches = build_training_set(&split.train, &CurationConfig::default(), config.seed)?;
    let report = train_filter(&patches, &DeskBackbone::new(config.seed), &config)?;
    write_head(&a.out, &report.head)?;
    println!(
        "filter: {} patches, train accuracy {:.3}, held-out accuracy {}",
        patches.patches.len(),
        report.train_accuracy,
        report.eval_accuracy.map_or("n/a".into(), |v| format!("{v:.3}"))
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let base = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Reference => TrainConfig::default(),
    };
    let mut c = layered(base, a.config.as_deref())?;
    if let Some(l) = &a.loss {
        c.loss = l.parse()?;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(lr) = a.lr {
        c.learning_rate = lr;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn train_counter_cmd(a: TrainCounterCmd) -> Result<()> {
    let config = train_config(&a.train)?;
    let split = load_split(&a.data)?;
    let entries = read_cache(&a.exemplars)?;
    let counter = Counter::new(config.counter.clone())?;
    let side = config.counter.exemplar_side as u32;
    let items = |records: &[CountingRecord], loss| -> Result<_> {
        let pairs = pairs_from_cache(&entries, records, side)?;
        Ok(counter_items(&counter, records, &pairs, config.sigma, loss)?)
    };
    let train = items(&split.train, config.loss)?;
    let val = if split.val.is_empty() { Vec::new() } else { items(&split.val, LossMode::DensityOnly)? };
    let outcome = train_from(counter.clone(), &train, &val, &config, |e| {
        println!(
            "epoch {:>3}  l_total {:.5}  l_d {:.5}  l_c {:.5}  val_mae {}",
            e.epoch,
            e.loss.l_total,
            e.loss.l_d,
            e.loss.l_c,
            e.val_mae.map_or("-".into(), |v| format!("{v:.3}"))
        )
    })?;
    write_checkpoint(&a.out, &outcome.checkpoint)?;
    if let Some(log) = &a.log {
        write_epoch_logs(log, &outcome.epochs)?;
    }
    println!("checkpoint {} (config {})", a.out.display(), outcome.checkpoint.config_hash);
    Ok(())
}

fn evaluate(a: Evaluate) -> Result<()> {
    let part: SplitPart = a.split.parse()?;
    let split = load_split(&a.data)?;
    let records = split.part(part);
    let mode = if a.detector_only { Mode::DetectCount } else { a.mode };
    let report: EvalReport = match mode {
        Mode::Counter => {
            let (Some(ckpt), Some(cache)) = (&a.checkpoint, &a.exemplars) else {
                bail!("--mode counter needs --checkpoint and --exemplars");
            };
            let checkpoint = read_checkpoint(ckpt)?;
            let counter = &checkpoint.counter;
            let pairs = pairs_from_cache(&read_cache(cache)?, records, counter.config.exemplar_side as u32)?;
            let items = counter_items(counter, records, &pairs, 4.0, LossMode::DensityOnly)?;
            evaluate_counter(counter, &items, &a.split, &checkpoint.config_hash)?
        }
        Mode::DetectCount => {
            let detector = build_detector(&a.detector, &a.data)?;
            let filter = build_filter(&a.filter)?;
            let hash = zsc_core::train::config_hash(&(&a.detector.detector, a.tau_l, filter.is_some()));
            evaluate_detect_count(
                records,
                detector.as_ref(),
                filter.as_ref().map(|f| f as &dyn PatchClassifier),
                a.tau_l,
                &a.split,
                &hash,
            )?
        }
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn sweep(a: Sweep) -> Result<()> {
    let param: SweepParam = a.param.parse()?;
    let base = ExperimentConfig::desk(SyntheticSpec::benchmark());
    let config: ExperimentConfig = layered(base, a.config.as_deref())?;
    let values = if a.values.is_empty() { param.default_grid() } else { a.values.clone() };
    let bench = Workbench::new(config.clone())?;
    let table = run_sweep(&bench, param, &values, &config.train, |r| {
        println!("{}={}  avg MAE {:.3}  avg RMSE {:.3}", param.name(), r.value, r.avg_mae, r.avg_rmse)
    })?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_text(&a.out_dir.join(format!("sweep_{}.csv", param.name())), &table.to_csv())?;
    let text = table.to_text();
    write_text(&a.out_dir.join(format!("sweep_{}.md", param.name())), &text)?;
    print!("{text}");
    Ok(())
}

fn render(a: Render) -> Result<()> {
    let records = load_dataset(&a.data, None)?;
    let record = records
        .iter()
        .find(|r| r.image_id == a.image_id)
        .with_context(|| format!("no image {:?} in {}", a.image_id, a.data.display()))?;
    let checkpoint = read_checkpoint(&a.checkpoint)?;
    let counter = &checkpoint.counter;
    let pairs = pairs_from_cache(&read_cache(&a.exemplars)?, std::slice::from_ref(record), counter.config.exemplar_side as u32)?;
    let image = record.image.load()?;
    let density = counter.forward(&image, &pairs[0].positive_patches())?;
    let boxes: Vec<_> = if a.no_boxes { Vec::new() } else { pairs[0].positives.iter().map(|e| e.source.bbox).collect() };
    write_overlay(&a.out, &image, &density, &boxes)?;
    println!("{}: predicted {:.2}, annotated {}; overlay {}", record.image_id, density.count(), record.count(), a.out.display());
    Ok(())
}
