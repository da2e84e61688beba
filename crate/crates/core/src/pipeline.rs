//! Data ingestion, normalization, windowing, and the task training loops.
//!
//! Tables arrive as headered CSV described by a TOML manifest; features are
//! z-scored with statistics fit on the training split only. Anomaly and
//! forecasting tasks slide stride-`s` windows over the series and score only
//! the final step of each window; classification treats each series id as
//! one (possibly padded) sample. Training is plain Adam over minibatches
//! with deterministic seeded shuffling, per-epoch structured logs, and a
//! best-validation snapshot.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::biprop;
use crate::error::{Error, Result};
use crate::model::{ForwardOpts, Task, TransformerModel};
use crate::optim::{Adam, ParamStore};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Epochs without validation improvement before the step-decay scheduler
/// cuts the learning rate.
pub const PLATEAU_PATIENCE: usize = 5;
/// Multiplicative learning-rate decay applied on a validation plateau.
pub const PLATEAU_GAMMA: f64 = 0.75;
/// Fraction of training windows held out (time-ordered tail) for validation.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: Option<String>,
    pub task: Task,
    /// CSV paths, relative to the manifest file's directory.
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Feature column names, in model-input order (defines m).
    pub features: Vec<String>,
    /// Class-id or anomaly-flag column.
    #[serde(default)]
    pub label: Option<String>,
    /// Per-sample series-id column (classification only).
    #[serde(default)]
    pub series: Option<String>,
    /// Window length w.
    pub window: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl DatasetManifest {
    /// Parse a manifest and resolve its CSV paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("reading {}: {e}", path.display())))?;
        let mut manifest: DatasetManifest = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if manifest.features.is_empty() {
            return Err(Error::config("manifest lists no feature columns"));
        }
        if manifest.window == 0 || manifest.stride == 0 {
            return Err(Error::config("window and stride must be positive"));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.train = base.join(&manifest.train);
        if let Some(test) = manifest.test.take() {
            manifest.test = Some(base.join(test));
        }
        Ok(manifest)
    }
}

/// One continuous multivariate series plus optional per-row anomaly flags.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub rows: Tensor<f64>,
    pub flags: Option<Vec<bool>>,
}

/// Padded classification samples: `x` is `(B, w, m)` with zero rows past each
/// sample's true length.
#[derive(Debug, Clone)]
pub struct ClassificationData {
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub lens: Vec<usize>,
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("opening {}: {e}", path.display())))
}

fn column_indices(headers: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::data(format!("column '{name}' not in header")))
        })
        .collect()
}

fn parse_cell(record: &csv::StringRecord, idx: usize, row: usize) -> Result<f64> {
    let raw = record
        .get(idx)
        .ok_or_else(|| Error::data(format!("row {row}: missing column {idx}")))?;
    raw.trim()
        .parse::<f64>()
        .map_err(|_| Error::data(format!("row {row}: '{raw}' is not a number")))
}

/// Load a continuous series table (anomaly/forecasting): one row per time
/// step, flag column nonzero = anomalous.
pub fn load_series_csv(
    path: &Path,
    features: &[String],
    label: Option<&str>,
) -> Result<RawSeries> {
    let mut reader = open_csv(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let feature_names: Vec<&str> = features.iter().map(String::as_str).collect();
    let feature_idx = column_indices(&headers, &feature_names)?;
    let label_idx = match label {
        Some(name) => Some(column_indices(&headers, &[name])?[0]),
        None => None,
    };
    let mut data = Vec::new();
    let mut flags = label_idx.map(|_| Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        for &idx in &feature_idx {
            data.push(parse_cell(&record, idx, row)?);
        }
        if let (Some(idx), Some(flags)) = (label_idx, flags.as_mut()) {
            flags.push(parse_cell(&record, idx, row)? != 0.0);
        }
    }
    if data.is_empty() {
        return Err(Error::data(format!("{} has no data rows", path.display())));
    }
    let rows = data.len() / features.len();
    Ok(RawSeries {
        rows: Tensor::from_vec(&[rows, features.len()], data)?,
        flags,
    })
}

/// Load a classification table: rows grouped by series id (contiguous or
/// not), one label per series, samples padded to the manifest window length.
pub fn load_classification_csv(
    path: &Path,
    features: &[String],
    label: &str,
    series: &str,
    w: usize,
) -> Result<ClassificationData> {
    let mut reader = open_csv(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let feature_names: Vec<&str> = features.iter().map(String::as_str).collect();
    let feature_idx = column_indices(&headers, &feature_names)?;
    let label_idx = column_indices(&headers, &[label])?[0];
    let series_idx = column_indices(&headers, &[series])?[0];

    let mut order: Vec<String> = Vec::new();
    let mut samples: BTreeMap<String, (usize, Vec<f64>)> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        let id = record
            .get(series_idx)
            .ok_or_else(|| Error::data(format!("row {row}: missing series id")))?
            .to_string();
        let class = parse_cell(&record, label_idx, row)?;
        if class < 0.0 || class.fract() != 0.0 {
            return Err(Error::data(format!("row {row}: label {class} is not a class id")));
        }
        let entry = samples
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                (class as usize, Vec::new())
            });
        if entry.0 != class as usize {
            return Err(Error::data(format!("series '{id}' has conflicting labels")));
        }
        for &idx in &feature_idx {
            entry.1.push(parse_cell(&record, idx, row)?);
        }
    }
    if order.is_empty() {
        return Err(Error::data(format!("{} has no data rows", path.display())));
    }
    let m = features.len();
    let mut x = Tensor::zeros(&[order.len(), w, m]);
    let mut labels = Vec::with_capacity(order.len());
    let mut lens = Vec::with_capacity(order.len());
    for (b, id) in order.iter().enumerate() {
        let (class, values) = &samples[id];
        let len = values.len() / m;
        if len == 0 || len > w {
            return Err(Error::data(format!(
                "series '{id}' has length {len}, window is {w}"
            )));
        }
        labels.push(*class);
        lens.push(len);
        for t in 0..len {
            for j in 0..m {
                x.set3(b, t, j, values[t * m + j]);
            }
        }
    }
    Ok(ClassificationData { x, labels, lens })
}

/// Per-feature z-score statistics, fit on the training split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations are floored here so constant features stay finite.
pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Fit on an `(T, m)` table; population standard deviation, floored.
    pub fn fit(rows: &Tensor<f64>) -> Result<Self> {
        if rows.rank() != 2 || rows.dim(0) < 2 {
            return Err(Error::data("normalizer needs a rank-2 table with >= 2 rows"));
        }
        let (n, m) = (rows.dim(0), rows.dim(1));
        let mut mean = vec![0.0; m];
        for t in 0..n {
            for j in 0..m {
                mean[j] += rows.at2(t, j);
            }
        }
        for mu in &mut mean {
            *mu /= n as f64;
        }
        let mut std = vec![0.0; m];
        for t in 0..n {
            for j in 0..m {
                let d = rows.at2(t, j) - mean[j];
                std[j] += d * d;
            }
        }
        for s in &mut std {
            *s = (*s / n as f64).sqrt().max(STD_FLOOR);
        }
        Ok(NormStats { mean, std })
    }

    /// Fit on padded classification samples, pooling only valid rows.
    pub fn fit_padded(x: &Tensor<f64>, lens: &[usize]) -> Result<Self> {
        let m = x.dim(2);
        let total: usize = lens.iter().sum();
        let mut flat = Vec::with_capacity(total * m);
        for (b, &len) in lens.iter().enumerate() {
            for t in 0..len {
                for j in 0..m {
                    flat.push(x.at3(b, t, j));
                }
            }
        }
        NormStats::fit(&Tensor::from_vec(&[total, m], flat)?)
    }

    pub fn apply(&self, rows: &Tensor<f64>) -> Result<Tensor<f64>> {
        if rows.rank() != 2 || rows.dim(1) != self.mean.len() {
            return Err(Error::shape("normalize", rows.dims(), &[0, self.mean.len()]));
        }
        let mut out = rows.clone();
        let (n, m) = (rows.dim(0), rows.dim(1));
        for t in 0..n {
            for j in 0..m {
                out.set2(t, j, (rows.at2(t, j) - self.mean[j]) / self.std[j]);
            }
        }
        Ok(out)
    }

    /// Normalize padded samples in place; padding rows stay zero.
    pub fn apply_padded(&self, x: &mut Tensor<f64>, lens: &[usize]) -> Result<()> {
        if x.rank() != 3 || x.dim(2) != self.mean.len() {
            return Err(Error::shape("normalize", x.dims(), &[0, 0, self.mean.len()]));
        }
        let m = self.mean.len();
        for (b, &len) in lens.iter().enumerate() {
            for t in 0..len {
                for j in 0..m {
                    let v = (x.at3(b, t, j) - self.mean[j]) / self.std[j];
                    x.set3(b, t, j, v);
                }
            }
        }
        Ok(())
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&mu, &sd))| v * sd + mu)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("encoding normalizer: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

/// Sliding windows over a series with their absolute end indices.
#[derive(Debug, Clone)]
pub struct WindowSet {
    /// `(B, w, m)` window stack.
    pub x: Tensor<f64>,
    /// Absolute index `t` of each window's final row.
    pub ends: Vec<usize>,
}

/// Windows `[t−w+1 … t]` for `t = w−1, w−1+stride, …`.
pub fn make_windows(rows: &Tensor<f64>, w: usize, stride: usize) -> Result<WindowSet> {
    if rows.rank() != 2 {
        return Err(Error::shape("windows", rows.dims(), &[0, 0]));
    }
    let (n, m) = (rows.dim(0), rows.dim(1));
    if n < w {
        return Err(Error::data(format!("series length {n} shorter than window {w}")));
    }
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let ends: Vec<usize> = (w - 1..n).step_by(stride).collect();
    let mut x = Tensor::zeros(&[ends.len(), w, m]);
    let src = rows.data();
    let dst = x.data_mut();
    for (b, &t) in ends.iter().enumerate() {
        let start = (t + 1 - w) * m;
        dst[b * w * m..(b + 1) * w * m].copy_from_slice(&src[start..start + w * m]);
    }
    Ok(WindowSet { x, ends })
}

/// Drop windows whose context rows (positions strictly before the final
/// step) carry an anomaly flag; the final step itself may be anomalous.
pub fn benign_filter(set: &WindowSet, flags: &[bool], w: usize) -> WindowSet {
    let keep: Vec<usize> = set
        .ends
        .iter()
        .enumerate()
        .filter(|(_, &t)| !flags[t + 1 - w..t].iter().any(|&f| f))
        .map(|(b, _)| b)
        .collect();
    let m = set.x.dim(2);
    let mut x = Tensor::zeros(&[keep.len(), w, m]);
    let mut ends = Vec::with_capacity(keep.len());
    for (out, &b) in keep.iter().enumerate() {
        x.data_mut()[out * w * m..(out + 1) * w * m]
            .copy_from_slice(&set.x.data()[b * w * m..(b + 1) * w * m]);
        ends.push(set.ends[b]);
    }
    WindowSet { x, ends }
}

/// Model-ready reconstruction batches: `x` is the input stack (final step
/// zeroed for forecasting), `targets` the true final rows `(B, m)`.
#[derive(Debug, Clone)]
pub struct ReconData {
    pub x: Tensor<f64>,
    pub targets: Tensor<f64>,
    pub ends: Vec<usize>,
}

/// Turn a window stack into reconstruction batches. Forecasting zeroes the
/// final step of each input after normalization, so zero is the feature
/// mean; the target keeps the true values.
pub fn recon_batches(set: &WindowSet, task: Task) -> Result<ReconData> {
    let (b, w, m) = (set.x.dim(0), set.x.dim(1), set.x.dim(2));
    let mut targets = Tensor::zeros(&[b, m]);
    let mut x = set.x.clone();
    for i in 0..b {
        for j in 0..m {
            targets.set2(i, j, set.x.at3(i, w - 1, j));
            if task == Task::Forecasting {
                x.set3(i, w - 1, j, 0.0);
            }
        }
    }
    Ok(ReconData {
        x,
        targets,
        ends: set.ends.clone(),
    })
}

/// Time-ordered tail split: the last `frac` of windows become validation.
pub fn split_tail(data: &ReconData, frac: f64) -> Result<(ReconData, ReconData)> {
    let b = data.x.dim(0);
    let n_val = ((b as f64 * frac).round() as usize).clamp(1, b.saturating_sub(1));
    if b < 2 {
        return Err(Error::data("need at least 2 windows to split"));
    }
    let cut = b - n_val;
    Ok((slice_recon(data, 0, cut), slice_recon(data, cut, b)))
}

fn slice_recon(data: &ReconData, start: usize, end: usize) -> ReconData {
    let (w, m) = (data.x.dim(1), data.x.dim(2));
    let n = end - start;
    let mut x = Tensor::zeros(&[n, w, m]);
    let mut targets = Tensor::zeros(&[n, m]);
    x.data_mut()
        .copy_from_slice(&data.x.data()[start * w * m..end * w * m]);
    targets
        .data_mut()
        .copy_from_slice(&data.targets.data()[start * m..end * m]);
    ReconData {
        x,
        targets,
        ends: data.ends[start..end].to_vec(),
    }
}

fn gather_recon(data: &ReconData, idx: &[usize]) -> ReconData {
    let (w, m) = (data.x.dim(1), data.x.dim(2));
    let mut x = Tensor::zeros(&[idx.len(), w, m]);
    let mut targets = Tensor::zeros(&[idx.len(), m]);
    for (out, &b) in idx.iter().enumerate() {
        x.data_mut()[out * w * m..(out + 1) * w * m]
            .copy_from_slice(&data.x.data()[b * w * m..(b + 1) * w * m]);
        targets.data_mut()[out * m..(out + 1) * m]
            .copy_from_slice(&data.targets.data()[b * m..(b + 1) * m]);
    }
    ReconData {
        x,
        targets,
        ends: idx.iter().map(|&b| data.ends[b]).collect(),
    }
}

fn gather_class(data: &ClassificationData, idx: &[usize]) -> ClassificationData {
    let (w, m) = (data.x.dim(1), data.x.dim(2));
    let mut x = Tensor::zeros(&[idx.len(), w, m]);
    for (out, &b) in idx.iter().enumerate() {
        x.data_mut()[out * w * m..(out + 1) * w * m]
            .copy_from_slice(&data.x.data()[b * w * m..(b + 1) * w * m]);
    }
    ClassificationData {
        x,
        labels: idx.iter().map(|&b| data.labels[b]).collect(),
        lens: idx.iter().map(|&b| data.lens[b]).collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Weight seed; replicate k trains at seed + k.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Step-decay scheduler (lr × 0.75 on validation plateau).
    #[serde(default)]
    pub scheduler: bool,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}
fn default_seed() -> u64 {
    7
}
fn default_replicates() -> usize {
    3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            epochs: 50,
            batch_size: default_batch(),
            seed: default_seed(),
            scheduler: false,
            replicates: default_replicates(),
        }
    }
}

/// Seeds trained when averaging over replicates.
pub fn replicate_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| base.wrapping_add(k)).collect()
}

/// One line of the training log; serialized as JSON per epoch. No wall-clock
/// fields, so fixed-seed runs produce byte-identical logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    /// Fraction of mask entries flipped since the previous epoch.
    pub mask_churn: f64,
    pub alphas: BTreeMap<String, f64>,
}

pub fn write_jsonl(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut out, entry)
            .map_err(|e| Error::data(format!("encoding log: {e}")))?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("creating {}: {e}", path.display())))?;
    file.write_all(&out)
        .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
}

/// A trained model with its parameters, log, and best-validation snapshot
/// already restored.
pub struct TrainedModel {
    pub model: TransformerModel<f64>,
    pub store: ParamStore<f64>,
    pub log: Vec<EpochLog>,
    pub best_val_loss: f64,
    pub best_val_accuracy: Option<f64>,
}

struct EpochState {
    adam: Adam,
    best_val: f64,
    best_snapshot: Vec<Tensor<f64>>,
    stall: usize,
    prev_masks: Vec<(String, Vec<u8>)>,
}

fn churn_since(
    model: &TransformerModel<f64>,
    store: &ParamStore<f64>,
    prev: &mut Vec<(String, Vec<u8>)>,
) -> Result<f64> {
    let current = model.current_masks(store)?;
    let mut flipped = 0usize;
    let mut total = 0usize;
    for ((_, old), (_, new)) in prev.iter().zip(&current) {
        total += new.len();
        flipped += old.iter().zip(new).filter(|(a, b)| a != b).count();
    }
    *prev = current;
    if total == 0 {
        Ok(0.0)
    } else {
        Ok(flipped as f64 / total as f64)
    }
}

fn finish_epoch(
    state: &mut EpochState,
    scheduler: bool,
    val_loss: f64,
    store: &ParamStore<f64>,
) -> bool {
    let improved = val_loss < state.best_val;
    if improved {
        state.best_val = val_loss;
        state.best_snapshot = store.snapshot();
        state.stall = 0;
    } else {
        state.stall += 1;
        if scheduler && state.stall >= PLATEAU_PATIENCE {
            state.adam.lr *= PLATEAU_GAMMA;
            state.stall = 0;
        }
    }
    improved
}

fn check_finite(loss: f64, epoch: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{what} loss became non-finite at epoch {epoch}"
        )))
    }
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xDA7A))
}

fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(batch))
        .map(|i| (i * batch, ((i + 1) * batch).min(n)))
        .collect()
}

/// Train a classifier; `val` drives the best-checkpoint selection and the
/// logged accuracy.
pub fn train_classifier(
    model: &mut TransformerModel<f64>,
    store: &mut ParamStore<f64>,
    train: &ClassificationData,
    val: &ClassificationData,
    tc: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    let n = train.x.dim(0);
    if n == 0 {
        return Err(Error::data("empty training set"));
    }
    let mut rng = shuffle_rng(model.config.seed);
    let mut state = EpochState {
        adam: Adam::new(tc.lr),
        best_val: f64::INFINITY,
        best_snapshot: store.snapshot(),
        stall: 0,
        prev_masks: model.current_masks(store)?,
    };
    let mut log = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for (lo, hi) in batch_ranges(n, tc.batch_size) {
            let batch = gather_class(train, &order[lo..hi]);
            let mut tape = Tape::new();
            let out = model.forward(
                &mut tape,
                store,
                &batch.x,
                Some(&batch.lens),
                ForwardOpts::train(),
            )?;
            let loss = tape.cross_entropy(out.output, batch.labels.clone())?;
            let loss_value = tape.value(loss).item();
            check_finite(loss_value, epoch, "train")?;
            train_loss += loss_value * (hi - lo) as f64;
            let grads = tape.backward(loss)?;
            store.zero_grads();
            tape.apply_grads(&grads, store)?;
            state.adam.step(store);
        }
        train_loss /= n as f64;
        let (val_loss, val_accuracy) = classifier_val(model, store, val, tc.batch_size)?;
        check_finite(val_loss, epoch, "validation")?;
        let churn = churn_since(model, store, &mut state.prev_masks)?;
        log.push(EpochLog {
            epoch,
            lr: state.adam.lr,
            train_loss,
            val_loss,
            val_accuracy: Some(val_accuracy),
            mask_churn: churn,
            alphas: model.current_alphas(store)?.into_iter().collect(),
        });
        finish_epoch(&mut state, tc.scheduler, val_loss, store);
    }
    if tc.epochs > 0 {
        store.restore(&state.best_snapshot)?;
    }
    Ok(log)
}

fn classifier_val(
    model: &mut TransformerModel<f64>,
    store: &ParamStore<f64>,
    val: &ClassificationData,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = val.x.dim(0);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (lo, hi) in batch_ranges(n, batch_size) {
        let idx: Vec<usize> = (lo..hi).collect();
        let batch = gather_class(val, &idx);
        let mut tape = Tape::new();
        let out = model.forward(
            &mut tape,
            store,
            &batch.x,
            Some(&batch.lens),
            ForwardOpts::eval(),
        )?;
        let loss = tape.cross_entropy(out.output, batch.labels.clone())?;
        loss_sum += tape.value(loss).item() * (hi - lo) as f64;
        correct += count_correct(tape.value(out.output), &batch.labels);
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

fn count_correct(logits: &Tensor<f64>, labels: &[usize]) -> usize {
    let (b, l) = (logits.dim(0), logits.dim(1));
    let mut correct = 0;
    for i in 0..b {
        let mut best = 0;
        for c in 1..l {
            if logits.at2(i, c) > logits.at2(i, best) {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct
}

/// Top-1 accuracy and per-class (correct, total) counts.
pub fn evaluate_classification(
    model: &mut TransformerModel<f64>,
    store: &ParamStore<f64>,
    data: &ClassificationData,
    batch_size: usize,
) -> Result<(f64, Vec<(usize, usize)>)> {
    let classes = model.config.classes;
    let mut per_class = vec![(0usize, 0usize); classes];
    let n = data.x.dim(0);
    let mut correct_total = 0;
    for (lo, hi) in batch_ranges(n, batch_size) {
        let idx: Vec<usize> = (lo..hi).collect();
        let batch = gather_class(data, &idx);
        let mut tape = Tape::new();
        let out = model.forward(
            &mut tape,
            store,
            &batch.x,
            Some(&batch.lens),
            ForwardOpts::eval(),
        )?;
        let logits = tape.value(out.output);
        for (i, &label) in batch.labels.iter().enumerate() {
            let mut best = 0;
            for c in 1..classes {
                if logits.at2(i, c) > logits.at2(i, best) {
                    best = c;
                }
            }
            per_class[label].1 += 1;
            if best == label {
                per_class[label].0 += 1;
                correct_total += 1;
            }
        }
    }
    Ok((correct_total as f64 / n as f64, per_class))
}

fn recon_loss_node(
    tape: &mut Tape<f64>,
    output: NodeId,
    w: usize,
    targets: Tensor<f64>,
) -> Result<NodeId> {
    let last = tape.select_time(output, w - 1)?;
    tape.mse_loss(last, targets)
}

/// Train a reconstruction/forecasting model on prepared window batches.
pub fn train_reconstructor(
    model: &mut TransformerModel<f64>,
    store: &mut ParamStore<f64>,
    train: &ReconData,
    val: &ReconData,
    tc: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    let n = train.x.dim(0);
    if n == 0 {
        return Err(Error::data("empty training set"));
    }
    let w = model.config.w;
    let mut rng = shuffle_rng(model.config.seed);
    let mut state = EpochState {
        adam: Adam::new(tc.lr),
        best_val: f64::INFINITY,
        best_snapshot: store.snapshot(),
        stall: 0,
        prev_masks: model.current_masks(store)?,
    };
    let mut log = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for (lo, hi) in batch_ranges(n, tc.batch_size) {
            let batch = gather_recon(train, &order[lo..hi]);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, store, &batch.x, None, ForwardOpts::train())?;
            let loss = recon_loss_node(&mut tape, out.output, w, batch.targets)?;
            let loss_value = tape.value(loss).item();
            check_finite(loss_value, epoch, "train")?;
            train_loss += loss_value * (hi - lo) as f64;
            let grads = tape.backward(loss)?;
            store.zero_grads();
            tape.apply_grads(&grads, store)?;
            state.adam.step(store);
        }
        train_loss /= n as f64;
        let val_loss = recon_val_loss(model, store, val, tc.batch_size)?;
        check_finite(val_loss, epoch, "validation")?;
        let churn = churn_since(model, store, &mut state.prev_masks)?;
        log.push(EpochLog {
            epoch,
            lr: state.adam.lr,
            train_loss,
            val_loss,
            val_accuracy: None,
            mask_churn: churn,
            alphas: model.current_alphas(store)?.into_iter().collect(),
        });
        finish_epoch(&mut state, tc.scheduler, val_loss, store);
    }
    if tc.epochs > 0 {
        store.restore(&state.best_snapshot)?;
    }
    Ok(log)
}

fn recon_val_loss(
    model: &mut TransformerModel<f64>,
    store: &ParamStore<f64>,
    val: &ReconData,
    batch_size: usize,
) -> Result<f64> {
    let scores = reconstruction_scores(model, store, val, batch_size)?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// Per-window reconstruction loss (mean squared error over features at the
/// final step), in window order. These are the anomaly scores.
pub fn reconstruction_scores(
    model: &mut TransformerModel<f64>,
    store: &ParamStore<f64>,
    data: &ReconData,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let n = data.x.dim(0);
    let (w, m) = (model.config.w, model.config.m);
    let mut scores = Vec::with_capacity(n);
    for (lo, hi) in batch_ranges(n, batch_size) {
        let idx: Vec<usize> = (lo..hi).collect();
        let batch = gather_recon(data, &idx);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &batch.x, None, ForwardOpts::eval())?;
        let pred = tape.value(out.output);
        for i in 0..(hi - lo) {
            let mut acc = 0.0;
            for j in 0..m {
                let d = pred.at3(i, w - 1, j) - batch.targets.at2(i, j);
                acc += d * d;
            }
            scores.push(acc / m as f64);
        }
    }
    Ok(scores)
}

/// Predicted vs actual final-step rows for every window, both denormalized.
pub fn forecast_rows(
    model: &mut TransformerModel<f64>,
    store: &ParamStore<f64>,
    data: &ReconData,
    stats: &NormStats,
    batch_size: usize,
) -> Result<Vec<(usize, Vec<f64>, Vec<f64>)>> {
    let n = data.x.dim(0);
    let (w, m) = (model.config.w, model.config.m);
    let mut rows = Vec::with_capacity(n);
    for (lo, hi) in batch_ranges(n, batch_size) {
        let idx: Vec<usize> = (lo..hi).collect();
        let batch = gather_recon(data, &idx);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &batch.x, None, ForwardOpts::eval())?;
        let pred = tape.value(out.output);
        for i in 0..(hi - lo) {
            let predicted: Vec<f64> = (0..m).map(|j| pred.at3(i, w - 1, j)).collect();
            let actual: Vec<f64> = (0..m).map(|j| batch.targets.at2(i, j)).collect();
            rows.push((
                data.ends[lo + i],
                stats.inverse_row(&predicted),
                stats.inverse_row(&actual),
            ));
        }
    }
    Ok(rows)
}

/// Mask-sparsity sanity check exposed for harness use: keep counts follow
/// the exact integer rule.
pub fn expected_keep(total: usize, p: f64) -> usize {
    biprop::keep_count(total, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, WeightMode};

    fn write_file(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, contents).unwrap();
        path
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("sbt-pipeline-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn normalizer_matches_hand_example_and_roundtrips() {
        let rows = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        let stats = NormStats::fit(&rows).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.std, vec![1.0]);
        let applied = stats
            .apply(&Tensor::from_vec(&[1, 1], vec![5.0]).unwrap())
            .unwrap();
        assert_eq!(applied.at2(0, 0), 3.0);

        let train_norm = stats.apply(&rows).unwrap();
        let mean: f64 = train_norm.data().iter().sum::<f64>() / 2.0;
        assert_eq!(mean, 0.0);
        let back = stats.inverse_row(&[train_norm.at2(0, 0)]);
        assert!((back[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_feature_is_floored() {
        let rows = Tensor::from_vec(&[3, 1], vec![4.0, 4.0, 4.0]).unwrap();
        let stats = NormStats::fit(&rows).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR]);
        let applied = stats.apply(&rows).unwrap();
        assert!(applied.all_finite());
    }

    #[test]
    fn window_counts_and_indices() {
        let rows = Tensor::from_vec(&[5, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let set = make_windows(&rows, 3, 1).unwrap();
        assert_eq!(set.ends, vec![2, 3, 4]);
        assert_eq!(set.x.dims(), &[3, 3, 1]);
        // Window ending at t contains rows t−w+1..t in order.
        for (b, &t) in set.ends.iter().enumerate() {
            for k in 0..3 {
                assert_eq!(set.x.at3(b, k, 0), (t + 1 - 3 + k) as f64);
            }
        }
        assert!(make_windows(&rows, 6, 1).is_err());
        let strided = make_windows(&rows, 2, 2).unwrap();
        assert_eq!(strided.ends, vec![1, 3]);
    }

    #[test]
    fn benign_filter_drops_contaminated_context() {
        let rows = Tensor::from_vec(&[5, 1], vec![0.0; 5]).unwrap();
        let set = make_windows(&rows, 3, 1).unwrap();
        let mut flags = vec![false; 5];
        flags[1] = true;
        let kept = benign_filter(&set, &flags, 3);
        assert_eq!(kept.ends, vec![4]);
        // An anomaly at the final step itself is retained.
        let mut last_flag = vec![false; 5];
        last_flag[4] = true;
        let kept = benign_filter(&set, &last_flag, 3);
        assert_eq!(kept.ends, vec![2, 3, 4]);
    }

    #[test]
    fn forecast_batches_zero_only_the_final_step() {
        let rows = Tensor::from_vec(&[2, 1], vec![3.0, 5.0]).unwrap();
        let set = make_windows(&rows, 2, 1).unwrap();
        let recon = recon_batches(&set, Task::Forecasting).unwrap();
        assert_eq!(recon.x.at3(0, 0, 0), 3.0);
        assert_eq!(recon.x.at3(0, 1, 0), 0.0);
        assert_eq!(recon.targets.at2(0, 0), 5.0);
        // Masking is idempotent.
        let again = recon_batches(
            &WindowSet {
                x: recon.x.clone(),
                ends: recon.ends.clone(),
            },
            Task::Forecasting,
        )
        .unwrap();
        assert_eq!(again.x.data(), recon.x.data());

        let anomaly = recon_batches(&set, Task::Anomaly).unwrap();
        assert_eq!(anomaly.x.at3(0, 1, 0), 5.0);
    }

    #[test]
    fn tail_split_preserves_order() {
        let rows = Tensor::from_vec(&[12, 1], (0..12).map(|v| v as f64).collect()).unwrap();
        let set = make_windows(&rows, 3, 1).unwrap();
        let recon = recon_batches(&set, Task::Anomaly).unwrap();
        let (train, val) = split_tail(&recon, VAL_FRACTION).unwrap();
        assert_eq!(train.ends.len() + val.ends.len(), recon.ends.len());
        assert_eq!(val.ends, vec![10, 11]);
        assert!(train.ends.iter().all(|&t| t < 10));
    }

    #[test]
    fn series_csv_roundtrip() {
        let dir = temp_dir("series");
        let csv = "a,b,is_anomaly\n1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,0\n";
        let path = write_file(&dir, "series.csv", csv);
        let series = load_series_csv(
            &path,
            &["a".into(), "b".into()],
            Some("is_anomaly"),
        )
        .unwrap();
        assert_eq!(series.rows.dims(), &[3, 2]);
        assert_eq!(series.rows.at2(1, 1), 4.0);
        assert_eq!(series.flags, Some(vec![false, true, false]));
        assert!(load_series_csv(&path, &["missing".into()], None).is_err());
    }

    #[test]
    fn classification_csv_groups_and_pads() {
        let dir = temp_dir("class");
        let csv = "sid,f1,f2,class\ns1,1.0,2.0,0\ns1,3.0,4.0,0\ns2,5.0,6.0,1\n";
        let path = write_file(&dir, "cls.csv", csv);
        let data =
            load_classification_csv(&path, &["f1".into(), "f2".into()], "class", "sid", 4)
                .unwrap();
        assert_eq!(data.x.dims(), &[2, 4, 2]);
        assert_eq!(data.labels, vec![0, 1]);
        assert_eq!(data.lens, vec![2, 1]);
        assert_eq!(data.x.at3(0, 1, 1), 4.0);
        assert_eq!(data.x.at3(0, 2, 0), 0.0);
        assert_eq!(data.x.at3(1, 0, 0), 5.0);

        let bad = "sid,f1,f2,class\ns1,1,2,0\ns1,3,4,1\n";
        let path = write_file(&dir, "bad.csv", bad);
        assert!(
            load_classification_csv(&path, &["f1".into(), "f2".into()], "class", "sid", 4)
                .is_err()
        );
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = temp_dir("manifest");
        write_file(&dir, "train.csv", "a\n1\n2\n");
        let manifest_path = write_file(
            &dir,
            "data.toml",
            "task = \"anomaly\"\ntrain = \"train.csv\"\nfeatures = [\"a\"]\nwindow = 2\n",
        );
        let manifest = DatasetManifest::load(&manifest_path).unwrap();
        assert_eq!(manifest.train, dir.join("train.csv"));
        assert_eq!(manifest.stride, 1);
        assert!(manifest.test.is_none());

        let bad = write_file(&dir, "bad.toml", "task = \"anomaly\"\nwindow = 2\n");
        assert!(DatasetManifest::load(&bad).is_err());
    }

    #[test]
    fn loss_examples() {
        // Reconstruction: prediction [0,0] against target [3,4] → (9+16)/2.
        let mut tape = Tape::<f64>::new();
        let pred = tape.constant(Tensor::from_vec(&[1, 2, 2], vec![0.0; 4]).unwrap());
        let last = tape.select_time(pred, 1).unwrap();
        let target = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let loss = tape.mse_loss(last, target).unwrap();
        assert!((tape.value(loss).item() - 12.5).abs() < 1e-12);

        // Classification: uniform logits over 9 classes → ln 9.
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 9]));
        let ce = tape.cross_entropy(logits, vec![2]).unwrap();
        assert!((tape.value(ce).item() - (9.0f64).ln()).abs() < 1e-12);
    }

    fn tiny_recon_config(mode: WeightMode) -> ModelConfig {
        let mut cfg = ModelConfig::new(Task::Forecasting, mode, 2, 8, 8);
        cfg.ff = 16;
        cfg.layers = 1;
        cfg
    }

    #[test]
    fn zero_epoch_training_leaves_parameters_unchanged() {
        let cfg = tiny_recon_config(WeightMode::Sbt);
        let mut store = ParamStore::new();
        let mut model = TransformerModel::build(cfg, &mut store).unwrap();
        let before = store.snapshot();
        let rows = crate::synthetic::ar1_series(40, &[0.5, 0.5], 3);
        let set = make_windows(&rows, 8, 1).unwrap();
        let recon = recon_batches(&set, Task::Forecasting).unwrap();
        let (train, val) = split_tail(&recon, VAL_FRACTION).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let log = train_reconstructor(&mut model, &mut store, &train, &val, &tc).unwrap();
        assert!(log.is_empty());
        let after = store.snapshot();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn fixed_seed_training_is_byte_identical() {
        let rows = crate::synthetic::ar1_series(60, &[0.7, 0.4], 5);
        let stats = NormStats::fit(&rows).unwrap();
        let normed = stats.apply(&rows).unwrap();
        let set = make_windows(&normed, 8, 1).unwrap();
        let recon = recon_batches(&set, Task::Forecasting).unwrap();
        let (train, val) = split_tail(&recon, VAL_FRACTION).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = |_: ()| {
            let cfg = tiny_recon_config(WeightMode::Sbt);
            let mut store = ParamStore::new();
            let mut model = TransformerModel::build(cfg, &mut store).unwrap();
            let log = train_reconstructor(&mut model, &mut store, &train, &val, &tc).unwrap();
            serde_json::to_string(&log).unwrap()
        };
        assert_eq!(run(()), run(()));
    }

    #[test]
    fn training_reduces_forecast_loss() {
        let rows = crate::synthetic::ar1_series(300, &[0.8, 0.6], 21);
        let stats = NormStats::fit(&rows).unwrap();
        let normed = stats.apply(&rows).unwrap();
        let set = make_windows(&normed, 8, 1).unwrap();
        let recon = recon_batches(&set, Task::Forecasting).unwrap();
        let (train, val) = split_tail(&recon, VAL_FRACTION).unwrap();
        let cfg = tiny_recon_config(WeightMode::Sbt);
        let mut store = ParamStore::new();
        let mut model = TransformerModel::build(cfg, &mut store).unwrap();
        let tc = TrainConfig {
            epochs: 10,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let log = train_reconstructor(&mut model, &mut store, &train, &val, &tc).unwrap();
        let first = log.first().unwrap().val_loss;
        let best = log
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(
            best < first,
            "validation never improved: first {first}, best {best}"
        );
        // The restored snapshot reproduces the best validation loss.
        let restored = recon_val_loss(&mut model, &store, &val, 32).unwrap();
        assert!((restored - best).abs() < 1e-9);
    }

    #[test]
    fn log_alphas_are_present_for_masked_models() {
        let rows = crate::synthetic::ar1_series(40, &[0.5, 0.5], 9);
        let set = make_windows(&rows, 8, 1).unwrap();
        let recon = recon_batches(&set, Task::Forecasting).unwrap();
        let (train, val) = split_tail(&recon, VAL_FRACTION).unwrap();
        let cfg = tiny_recon_config(WeightMode::Sbt);
        let mut store = ParamStore::new();
        let mut model = TransformerModel::build(cfg, &mut store).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let log = train_reconstructor(&mut model, &mut store, &train, &val, &tc).unwrap();
        let entry = &log[0];
        assert_eq!(
            entry.alphas.len(),
            model.binarized_module_count(),
            "one alpha per binarized module"
        );
        assert!(entry.alphas.keys().any(|k| k.contains("input_proj")));
    }
}
