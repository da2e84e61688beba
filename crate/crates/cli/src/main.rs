//! Command-line driver: train dense or masked models and freeze them into
//! containers, run packed containers through evaluation / detection /
//! forecasting, and reproduce the storage and non-zero-FLOP accounting.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sbt_core::artifact::{
    packed_classify, packed_scores, FrozenTransformer, InferMode, PackedModel,
};
use sbt_core::attention::AttentionVariant;
use sbt_core::costmodel::cost_report;
use sbt_core::model::{FrozenEntry, ModelConfig, Task, TransformerModel, WeightMode};
use sbt_core::pipeline::{
    benign_filter, evaluate_classification, load_classification_csv, load_series_csv,
    make_windows, recon_batches, replicate_seeds, split_tail, train_classifier,
    train_reconstructor, write_jsonl, ClassificationData, DatasetManifest, EpochLog, NormStats,
    RawSeries, TrainConfig,
};
use sbt_core::presets::PresetFile;
use sbt_core::threshold::{evaluate_detection, manual_threshold, pot_threshold, DetectionReport};
use sbt_core::{Error, ParamStore, Result, Tensor};

/// Fraction of windows held out (time-ordered tail) when a manifest has no
/// test split.
const VAL_FRACTION: f64 = 0.2;
/// Initial-threshold quantile for the peaks-over-threshold fit.
const POT_T0_QUANTILE: f64 = 0.98;
/// Batch size for packed inference.
const INFER_CHUNK: usize = 256;

#[derive(Parser)]
#[command(
    name = "sbt",
    version,
    about = "Sparse binary transformers for multivariate time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train replicates and freeze the best one into a packed container
    Train(TrainArgs),
    /// Accuracy or reconstruction error of a packed model on a dataset
    Eval(EvalArgs),
    /// Threshold a packed model's anomaly scores and score the detections
    Detect(DetectArgs),
    /// Export per-window predicted vs actual rows from a packed forecaster
    Forecast(ForecastArgs),
    /// Storage and FLOP accounting for one configuration
    Cost(CostArgs),
    /// Cost accounting across a range of model widths
    Sweep(SweepArgs),
    /// Convert a JSON checkpoint into a packed container
    Pack(PackArgs),
    /// Expand a packed container into a JSON checkpoint
    Unpack(UnpackArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Classify,
    Anomaly,
    Forecast,
}

impl From<TaskArg> for Task {
    fn from(arg: TaskArg) -> Task {
        match arg {
            TaskArg::Classify => Task::Classification,
            TaskArg::Anomaly => Task::Anomaly,
            TaskArg::Forecast => Task::Forecasting,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Canonical,
    StepT,
    QkvRandom,
    QkvMagnitude,
    Identity,
}

impl From<AttentionArg> for AttentionVariant {
    fn from(arg: AttentionArg) -> AttentionVariant {
        match arg {
            AttentionArg::Canonical => AttentionVariant::Canonical,
            AttentionArg::StepT => AttentionVariant::StepT,
            AttentionArg::QkvRandom => AttentionVariant::QkvRandom,
            AttentionArg::QkvMagnitude => AttentionVariant::QkvMagnitude,
            AttentionArg::Identity => AttentionVariant::Identity,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    Manual,
    Pot,
}

#[derive(Args)]
struct TrainArgs {
    /// Shipped preset name or TOML config file
    #[arg(long)]
    config: String,
    /// Dataset manifest (TOML)
    #[arg(long)]
    data: PathBuf,
    /// Sanity check against the manifest's task; they must agree
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Override the configured prune rate
    #[arg(long)]
    prune_rate: Option<f64>,
    /// Train the FP32 baseline instead of the masked model
    #[arg(long)]
    dense: bool,
    /// Override the attention variant
    #[arg(long, value_enum)]
    attention: Option<AttentionArg>,
    /// Base weight seed; replicate k trains at seed+k
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replicate runs
    #[arg(long)]
    replicates: Option<usize>,
    /// Output directory for container, norm stats, logs, and summary
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Packed container file
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest (TOML)
    #[arg(long)]
    data: PathBuf,
    /// Score only windows whose context rows are anomaly-free
    #[arg(long)]
    benign_filter: bool,
    /// Normalization stats JSON (default: norm.json next to the model)
    #[arg(long)]
    norm: Option<PathBuf>,
    /// Write the full report as JSON
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// Packed container file
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest with a labeled test split
    #[arg(long)]
    data: PathBuf,
    /// Threshold selection rule
    #[arg(long, value_enum)]
    threshold: ThresholdArg,
    /// Anomaly rate for the manual quantile rule
    #[arg(long, default_value_t = 0.01)]
    r: f64,
    /// Risk level for the extrapolated threshold
    #[arg(long, default_value_t = 1e-3)]
    q: f64,
    /// Normalization stats JSON (default: norm.json next to the model)
    #[arg(long)]
    norm: Option<PathBuf>,
    /// Write the full report as JSON
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    /// Packed container file
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest (TOML)
    #[arg(long)]
    data: PathBuf,
    /// Normalization stats JSON (default: norm.json next to the model)
    #[arg(long)]
    norm: Option<PathBuf>,
    /// CSV of per-feature predicted vs actual rows
    #[arg(long)]
    emit_predictions: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// Shipped preset name or TOML config file
    #[arg(long)]
    config: String,
    /// Scenarios to tabulate
    #[arg(long, default_value = "dense,sbt", value_delimiter = ',')]
    compare: Vec<String>,
    /// Write the full report as JSON
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Shipped preset name or TOML config file
    #[arg(long)]
    config: String,
    /// Model widths to sweep
    #[arg(long, value_delimiter = ',')]
    d: Vec<usize>,
    /// Write the rows as JSON
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PackArgs {
    /// JSON checkpoint (config + frozen modules)
    #[arg(long)]
    input: PathBuf,
    /// Container file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UnpackArgs {
    /// Packed container file
    #[arg(long)]
    model: PathBuf,
    /// JSON checkpoint to write
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::Cost(args) => cmd_cost(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Pack(args) => cmd_pack(args),
        Command::Unpack(args) => cmd_unpack(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

// ---------------------------------------------------------------- train --

#[derive(Serialize)]
struct ReplicateRow {
    seed: u64,
    best_val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct TrainSummary {
    config: ModelConfig,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    replicates: Vec<ReplicateRow>,
    best_seed: u64,
    container_payload_bits: u64,
    container_information_bits: u64,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let preset = PresetFile::load(&args.config)?;
    let manifest = DatasetManifest::load(&args.data)?;
    if let Some(flag) = args.task {
        if Task::from(flag) != manifest.task {
            return Err(Error::config(format!(
                "--task disagrees with the manifest's task ({:?})",
                manifest.task
            )));
        }
    }
    let mut cfg = preset.model.clone();
    cfg.task = manifest.task;
    cfg.m = manifest.features.len();
    cfg.w = manifest.window;
    if args.dense {
        cfg.mode = WeightMode::Dense;
    }
    if let Some(p) = args.prune_rate {
        cfg.prune_rate = p;
    }
    if let Some(a) = args.attention {
        cfg.attention = Some(a.into());
    }
    let mut tc = preset.train.resolve(cfg.task, cfg.mode);
    if let Some(seed) = args.seed {
        tc.seed = seed;
    }
    if let Some(n) = args.replicates {
        if n == 0 {
            return Err(Error::config("--replicates must be positive"));
        }
        tc.replicates = n;
    }
    std::fs::create_dir_all(&args.out)?;
    match cfg.task {
        Task::Classification => train_classification(cfg, tc, &manifest, &args.out),
        Task::Anomaly | Task::Forecasting => train_series(cfg, tc, &manifest, &args.out),
    }
}

struct Replicate {
    seed: u64,
    best_val_loss: f64,
    val_accuracy: Option<f64>,
    model: TransformerModel<f64>,
    store: ParamStore<f64>,
}

fn best_val(log: &[EpochLog]) -> f64 {
    log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
}

fn finish_training(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    runs: Vec<Replicate>,
    out: &Path,
) -> Result<()> {
    let rows: Vec<ReplicateRow> = runs
        .iter()
        .map(|r| ReplicateRow {
            seed: r.seed,
            best_val_loss: r.best_val_loss,
            val_accuracy: r.val_accuracy,
        })
        .collect();
    let best = runs
        .into_iter()
        .min_by(|a, b| a.best_val_loss.total_cmp(&b.best_val_loss))
        .ok_or_else(|| Error::config("no replicates trained"))?;
    let entries = best.model.freeze(&best.store)?;
    let packed = PackedModel::new(best.model.config.clone(), entries);
    let container = packed.report();
    let model_path = out.join("model.sbt1");
    packed.save(&model_path)?;
    let summary = TrainSummary {
        config: cfg.clone(),
        epochs: tc.epochs,
        lr: tc.lr,
        batch_size: tc.batch_size,
        replicates: rows,
        best_seed: best.seed,
        container_payload_bits: container.payload_bits,
        container_information_bits: container.information_bits,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "packed seed {} into {} ({} payload bits)",
        best.seed,
        model_path.display(),
        group_digits(container.payload_bits)
    );
    Ok(())
}

fn train_classification(
    cfg: ModelConfig,
    tc: TrainConfig,
    manifest: &DatasetManifest,
    out: &Path,
) -> Result<()> {
    let label = manifest
        .label
        .as_deref()
        .ok_or_else(|| Error::config("classification manifest needs a label column"))?;
    let series = manifest
        .series
        .as_deref()
        .ok_or_else(|| Error::config("classification manifest needs a series column"))?;
    let train = load_classification_csv(&manifest.train, &manifest.features, label, series, cfg.w)?;
    let val = match &manifest.test {
        Some(path) => load_classification_csv(path, &manifest.features, label, series, cfg.w)?,
        None => train.clone(),
    };
    let max_label = train
        .labels
        .iter()
        .chain(&val.labels)
        .copied()
        .max()
        .unwrap_or(0);
    if max_label >= cfg.classes {
        return Err(Error::data(format!(
            "label {max_label} exceeds the configured {} classes",
            cfg.classes
        )));
    }
    cfg.validate()?;
    let mut runs = Vec::new();
    for seed in replicate_seeds(tc.seed, tc.replicates) {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let mut store = ParamStore::new();
        let mut model = TransformerModel::build(run_cfg, &mut store)?;
        let log = train_classifier(&mut model, &mut store, &train, &val, &tc)?;
        write_jsonl(&out.join(format!("train-seed{seed}.jsonl")), &log)?;
        let (accuracy, _) = evaluate_classification(&mut model, &store, &val, tc.batch_size)?;
        let best = best_val(&log);
        println!("seed {seed}: val loss {best:.4}, accuracy {accuracy:.3}");
        runs.push(Replicate {
            seed,
            best_val_loss: best,
            val_accuracy: Some(accuracy),
            model,
            store,
        });
    }
    finish_training(&cfg, &tc, runs, out)
}

fn train_series(
    cfg: ModelConfig,
    tc: TrainConfig,
    manifest: &DatasetManifest,
    out: &Path,
) -> Result<()> {
    let raw = load_series_csv(&manifest.train, &manifest.features, manifest.label.as_deref())?;
    let stats = NormStats::fit(&raw.rows)?;
    let rows = stats.apply(&raw.rows)?;
    let mut set = make_windows(&rows, cfg.w, manifest.stride)?;
    if let Some(flags) = &raw.flags {
        let before = set.ends.len();
        set = benign_filter(&set, flags, cfg.w);
        if set.ends.len() < before {
            println!(
                "dropped {} windows with anomalous context rows",
                before - set.ends.len()
            );
        }
    }
    let data = recon_batches(&set, cfg.task)?;
    let (train, val) = split_tail(&data, VAL_FRACTION)?;
    cfg.validate()?;
    let mut runs = Vec::new();
    for seed in replicate_seeds(tc.seed, tc.replicates) {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let mut store = ParamStore::new();
        let mut model = TransformerModel::build(run_cfg, &mut store)?;
        let log = train_reconstructor(&mut model, &mut store, &train, &val, &tc)?;
        write_jsonl(&out.join(format!("train-seed{seed}.jsonl")), &log)?;
        let best = best_val(&log);
        println!("seed {seed}: val loss {best:.4}");
        runs.push(Replicate {
            seed,
            best_val_loss: best,
            val_accuracy: None,
            model,
            store,
        });
    }
    stats.save(&out.join("norm.json"))?;
    finish_training(&cfg, &tc, runs, out)
}

// ----------------------------------------------------------------- eval --

#[derive(Serialize)]
struct ClassEvalReport {
    samples: usize,
    accuracy: f64,
    per_class: Vec<ClassRow>,
}

#[derive(Serialize)]
struct ClassRow {
    class: usize,
    correct: usize,
    total: usize,
}

#[derive(Serialize)]
struct ScoreEvalReport {
    windows: usize,
    mean_score: f64,
    max_score: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let packed = PackedModel::load(&args.model)?;
    let frozen = FrozenTransformer::from_packed(&packed)?;
    let cfg = frozen.config().clone();
    let manifest = DatasetManifest::load(&args.data)?;
    check_shapes(&cfg, &manifest)?;
    match cfg.task {
        Task::Classification => {
            let (data, _) = classification_eval_split(&manifest, cfg.w)?;
            let x = to_f32(&data.x);
            let preds = packed_classify(&frozen, &x, &data.lens, INFER_CHUNK)?;
            let mut per_class = vec![(0usize, 0usize); cfg.classes];
            let mut correct = 0usize;
            for (&pred, &label) in preds.iter().zip(&data.labels) {
                per_class[label].1 += 1;
                if pred == label {
                    per_class[label].0 += 1;
                    correct += 1;
                }
            }
            let report = ClassEvalReport {
                samples: data.labels.len(),
                accuracy: correct as f64 / data.labels.len() as f64,
                per_class: per_class
                    .into_iter()
                    .enumerate()
                    .map(|(class, (correct, total))| ClassRow {
                        class,
                        correct,
                        total,
                    })
                    .collect(),
            };
            println!(
                "accuracy {:.4} on {} samples",
                report.accuracy, report.samples
            );
            maybe_write_json(args.report.as_deref(), &report)
        }
        Task::Anomaly | Task::Forecasting => {
            let (raw, _) = series_eval_split(&manifest)?;
            let stats = resolve_norm(args.norm.as_deref(), &args.model, &raw.rows)?;
            let rows = stats.apply(&raw.rows)?;
            let mut set = make_windows(&rows, cfg.w, manifest.stride)?;
            if args.benign_filter {
                let flags = raw.flags.as_ref().ok_or_else(|| {
                    Error::config("--benign-filter needs a label column in the manifest")
                })?;
                set = benign_filter(&set, flags, cfg.w);
            }
            let data = recon_batches(&set, cfg.task)?;
            let scores = packed_scores(&frozen, &to_f32(&data.x), &to_f32(&data.targets), INFER_CHUNK)?;
            let report = ScoreEvalReport {
                windows: scores.len(),
                mean_score: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
                max_score: scores.iter().copied().fold(0.0, f64::max),
            };
            println!(
                "mean reconstruction error {:.6} over {} windows",
                report.mean_score, report.windows
            );
            maybe_write_json(args.report.as_deref(), &report)
        }
    }
}

// --------------------------------------------------------------- detect --

#[derive(Serialize)]
struct DetectReportFile {
    threshold: serde_json::Value,
    detection: DetectionReport,
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let packed = PackedModel::load(&args.model)?;
    let frozen = FrozenTransformer::from_packed(&packed)?;
    let cfg = frozen.config().clone();
    if cfg.task == Task::Classification {
        return Err(Error::config(
            "detection needs a reconstruction or forecasting model",
        ));
    }
    let manifest = DatasetManifest::load(&args.data)?;
    check_shapes(&cfg, &manifest)?;
    let test_path = manifest
        .test
        .as_ref()
        .ok_or_else(|| Error::config("detection needs a labeled test split in the manifest"))?;
    let raw = load_series_csv(test_path, &manifest.features, manifest.label.as_deref())?;
    let flags = raw
        .flags
        .as_ref()
        .ok_or_else(|| Error::data("test split has no anomaly flags"))?;
    let stats = resolve_norm(args.norm.as_deref(), &args.model, &raw.rows)?;
    let rows = stats.apply(&raw.rows)?;
    let set = make_windows(&rows, cfg.w, manifest.stride)?;
    let data = recon_batches(&set, cfg.task)?;
    let scores = packed_scores(&frozen, &to_f32(&data.x), &to_f32(&data.targets), INFER_CHUNK)?;
    let gt: Vec<bool> = data.ends.iter().map(|&t| flags[t]).collect();
    let (tau, mode, threshold_detail) = match args.threshold {
        ThresholdArg::Manual => {
            let tau = manual_threshold(&scores, args.r)?;
            (tau, "manual", serde_json::json!({ "rule": "manual", "r": args.r, "tau": tau }))
        }
        ThresholdArg::Pot => {
            let pot = pot_threshold(&scores, args.q, POT_T0_QUANTILE)?;
            let detail = serde_json::to_value(&pot)
                .map_err(|e| Error::data(format!("encoding threshold: {e}")))?;
            (pot.tau, "pot", detail)
        }
    };
    let detection = evaluate_detection(&scores, &gt, tau, mode)?;
    println!(
        "{mode} threshold {tau:.6}: adjusted P {:.3} R {:.3} F1 {:.3} (raw F1 {:.3})",
        detection.adjusted.precision,
        detection.adjusted.recall,
        detection.adjusted.f1,
        detection.raw.f1
    );
    maybe_write_json(
        args.report.as_deref(),
        &DetectReportFile {
            threshold: threshold_detail,
            detection,
        },
    )
}

// ------------------------------------------------------------- forecast --

fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let packed = PackedModel::load(&args.model)?;
    let frozen = FrozenTransformer::from_packed(&packed)?;
    let cfg = frozen.config().clone();
    if cfg.task != Task::Forecasting {
        return Err(Error::config("forecast needs a forecasting model"));
    }
    let manifest = DatasetManifest::load(&args.data)?;
    check_shapes(&cfg, &manifest)?;
    let (raw, _) = series_eval_split(&manifest)?;
    let stats = resolve_norm(args.norm.as_deref(), &args.model, &raw.rows)?;
    let rows = stats.apply(&raw.rows)?;
    let set = make_windows(&rows, cfg.w, manifest.stride)?;
    let data = recon_batches(&set, cfg.task)?;

    let mut writer = csv::Writer::from_path(&args.emit_predictions)
        .map_err(|e| Error::data(format!("creating {}: {e}", args.emit_predictions.display())))?;
    let mut header = vec!["t".to_string()];
    for name in &manifest.features {
        header.push(format!("{name}_pred"));
    }
    for name in &manifest.features {
        header.push(format!("{name}_actual"));
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::data(format!("writing header: {e}")))?;

    let x = to_f32(&data.x);
    let (n, w, m) = (x.dim(0), cfg.w, cfg.m);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + INFER_CHUNK).min(n);
        let mut part = Tensor::zeros(&[hi - lo, w, m]);
        part.data_mut()
            .copy_from_slice(&x.data()[lo * w * m..hi * w * m]);
        let pred = frozen.infer(&part, None, InferMode::Packed)?;
        for i in 0..(hi - lo) {
            let predicted: Vec<f64> = (0..m).map(|j| pred.at3(i, w - 1, j) as f64).collect();
            let actual: Vec<f64> = (0..m).map(|j| data.targets.at2(lo + i, j)).collect();
            let mut record = vec![data.ends[lo + i].to_string()];
            for v in stats.inverse_row(&predicted) {
                record.push(format!("{v}"));
            }
            for v in stats.inverse_row(&actual) {
                record.push(format!("{v}"));
            }
            writer
                .write_record(&record)
                .map_err(|e| Error::data(format!("writing row: {e}")))?;
        }
        lo = hi;
    }
    writer
        .flush()
        .map_err(|e| Error::data(format!("flushing predictions: {e}")))?;
    println!(
        "wrote {} prediction rows to {}",
        n,
        args.emit_predictions.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- cost --

fn cmd_cost(args: CostArgs) -> Result<()> {
    let preset = PresetFile::load(&args.config)?;
    let report = cost_report(&preset.model)?;
    println!(
        "task {:?}  m {}  w {}  d {}  layers {}  p {}",
        report.task, report.m, report.w, report.d, report.layers, report.prune_rate
    );
    println!(
        "{:<10} {:>14} {:>16} {:>16} {:>10}",
        "scenario", "params", "bits", "flops", "~savings"
    );
    for scenario in &args.compare {
        let (params, bits, flops) = match scenario.as_str() {
            "dense" => (
                report.size.dense_params,
                report.size.dense_bits,
                report.dense_flops.total,
            ),
            "sbt" => (
                report.size.binary_params,
                report.size.sbt_info_bits,
                report.sbt_flops.total,
            ),
            "pruned32" => (
                report.size.pruned_fp32_bits / 32.0,
                report.size.pruned_fp32_bits,
                report.sbt_flops.total,
            ),
            "pruned8" => (
                report.size.pruned_8bit_bits / 8.0,
                report.size.pruned_8bit_bits,
                report.sbt_flops.total,
            ),
            other => {
                return Err(Error::config(format!(
                    "unknown scenario '{other}' (expected dense, sbt, pruned32, pruned8)"
                )))
            }
        };
        println!(
            "{:<10} {:>14} {:>16} {:>16} {:>10}",
            scenario,
            group_digits(params.round() as u64),
            group_digits(bits.round() as u64),
            group_digits(flops.round() as u64),
            format!("~x{:.1}", report.size.dense_bits / bits)
        );
    }
    println!(
        "non-zero FLOPs: dense {} vs sbt {} (~x{:.1})",
        group_digits(report.dense_flops.total.round() as u64),
        group_digits(report.sbt_flops.total.round() as u64),
        report.flops_ratio
    );
    maybe_write_json(args.report.as_deref(), &report)
}

// ---------------------------------------------------------------- sweep --

#[derive(Serialize)]
struct SweepRow {
    d: usize,
    dense_bits: f64,
    sbt_bits: f64,
    bits_ratio: f64,
    dense_flops: f64,
    sbt_flops: f64,
    flops_ratio: f64,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.d.is_empty() {
        return Err(Error::config("--d needs at least one width"));
    }
    let preset = PresetFile::load(&args.config)?;
    let mut rows = Vec::with_capacity(args.d.len());
    println!(
        "{:>6} {:>16} {:>14} {:>8} {:>16} {:>14} {:>8}",
        "d", "dense bits", "sbt bits", "~ratio", "dense flops", "sbt flops", "~ratio"
    );
    for &d in &args.d {
        let mut cfg = preset.model.clone();
        cfg.d = d;
        cfg.validate()?;
        let report = cost_report(&cfg)?;
        let row = SweepRow {
            d,
            dense_bits: report.size.dense_bits,
            sbt_bits: report.size.sbt_info_bits,
            bits_ratio: report.size.compression_ratio,
            dense_flops: report.dense_flops.total,
            sbt_flops: report.sbt_flops.total,
            flops_ratio: report.flops_ratio,
        };
        println!(
            "{:>6} {:>16} {:>14} {:>8} {:>16} {:>14} {:>8}",
            row.d,
            group_digits(row.dense_bits.round() as u64),
            group_digits(row.sbt_bits.round() as u64),
            format!("~x{:.1}", row.bits_ratio),
            group_digits(row.dense_flops.round() as u64),
            group_digits(row.sbt_flops.round() as u64),
            format!("~x{:.1}", row.flops_ratio)
        );
        rows.push(row);
    }
    maybe_write_json(args.report.as_deref(), &rows)
}

// ----------------------------------------------------------- pack/unpack --

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    entries: Vec<FrozenEntry>,
}

fn cmd_pack(args: PackArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| Error::data(format!("reading {}: {e}", args.input.display())))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: {e}", args.input.display())))?;
    checkpoint.config.validate()?;
    let packed = PackedModel::new(checkpoint.config, checkpoint.entries);
    packed.save(&args.out)?;
    println!("packed {} modules into {}", packed.entries.len(), args.out.display());
    Ok(())
}

fn cmd_unpack(args: UnpackArgs) -> Result<()> {
    let packed = PackedModel::load(&args.model)?;
    let checkpoint = Checkpoint {
        config: packed.config,
        entries: packed.entries,
    };
    write_json(&args.out, &checkpoint)?;
    println!(
        "unpacked {} modules into {}",
        checkpoint.entries.len(),
        args.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------- helpers --

fn to_f32(x: &Tensor<f64>) -> Tensor<f32> {
    let data: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
    Tensor::from_vec(x.dims(), data).expect("same shape")
}

fn check_shapes(cfg: &ModelConfig, manifest: &DatasetManifest) -> Result<()> {
    if cfg.task != manifest.task {
        return Err(Error::config(format!(
            "model task {:?} vs manifest task {:?}",
            cfg.task, manifest.task
        )));
    }
    if cfg.m != manifest.features.len() {
        return Err(Error::config(format!(
            "model expects {} features, manifest lists {}",
            cfg.m,
            manifest.features.len()
        )));
    }
    if cfg.w != manifest.window {
        return Err(Error::config(format!(
            "model window {} vs manifest window {}",
            cfg.w, manifest.window
        )));
    }
    Ok(())
}

/// Classification data for evaluation: the test split when the manifest has
/// one, the training split otherwise.
fn classification_eval_split(
    manifest: &DatasetManifest,
    w: usize,
) -> Result<(ClassificationData, bool)> {
    let label = manifest
        .label
        .as_deref()
        .ok_or_else(|| Error::config("classification manifest needs a label column"))?;
    let series = manifest
        .series
        .as_deref()
        .ok_or_else(|| Error::config("classification manifest needs a series column"))?;
    match &manifest.test {
        Some(path) => Ok((
            load_classification_csv(path, &manifest.features, label, series, w)?,
            true,
        )),
        None => Ok((
            load_classification_csv(&manifest.train, &manifest.features, label, series, w)?,
            false,
        )),
    }
}

/// Series data for evaluation: the test split when present, else the train
/// split.
fn series_eval_split(manifest: &DatasetManifest) -> Result<(RawSeries, bool)> {
    let label = manifest.label.as_deref();
    match &manifest.test {
        Some(path) => Ok((load_series_csv(path, &manifest.features, label)?, true)),
        None => Ok((load_series_csv(&manifest.train, &manifest.features, label)?, false)),
    }
}

/// Normalization stats: explicit flag, then `norm.json` next to the model,
/// then (with a warning) statistics of the evaluated series itself.
fn resolve_norm(flag: Option<&Path>, model_path: &Path, rows: &Tensor<f64>) -> Result<NormStats> {
    if let Some(path) = flag {
        return NormStats::load(path);
    }
    if let Some(sibling) = model_path.parent().map(|dir| dir.join("norm.json")) {
        if sibling.exists() {
            return NormStats::load(&sibling);
        }
    }
    eprintln!("note: no norm stats found; fitting on the evaluated series");
    NormStats::fit(rows)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("encoding report: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
}

fn maybe_write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(path) => write_json(path, value),
        None => Ok(()),
    }
}

fn group_digits(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}
