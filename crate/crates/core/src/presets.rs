//! Shipped dataset configurations and the preset/config-file resolver.
//!
//! Each preset is a TOML file embedded at build time and also present under
//! `presets/` in the source tree: a `[model]` table deserializing straight
//! into [`ModelConfig`] (mode `sbt` with the published prune rate; switch to
//! dense at run time) and a `[train]` table of per-mode training defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task, WeightMode};
use crate::pipeline::TrainConfig;

pub const PRESET_NAMES: [&str; 11] = [
    "heartbeat",
    "insect-wingbeats",
    "arabic-digits",
    "japanese-vowels",
    "face-detection",
    "msl",
    "smap",
    "smd",
    "ecl",
    "weather",
    "ettm1",
];

/// Embedded preset TOML by name, if `name` is a shipped preset.
pub fn builtin(name: &str) -> Option<&'static str> {
    Some(match name {
        "heartbeat" => include_str!("../../../presets/heartbeat.toml"),
        "insect-wingbeats" => include_str!("../../../presets/insect-wingbeats.toml"),
        "arabic-digits" => include_str!("../../../presets/arabic-digits.toml"),
        "japanese-vowels" => include_str!("../../../presets/japanese-vowels.toml"),
        "face-detection" => include_str!("../../../presets/face-detection.toml"),
        "msl" => include_str!("../../../presets/msl.toml"),
        "smap" => include_str!("../../../presets/smap.toml"),
        "smd" => include_str!("../../../presets/smd.toml"),
        "ecl" => include_str!("../../../presets/ecl.toml"),
        "weather" => include_str!("../../../presets/weather.toml"),
        "ettm1" => include_str!("../../../presets/ettm1.toml"),
        _ => return None,
    })
}

/// Fallback epoch budget when neither the flag nor the config file sets one.
/// Masked classification models converge slower than dense ones and get a
/// longer default; reconstruction tasks share one budget per task.
pub fn default_epochs(task: Task, mode: WeightMode) -> usize {
    match (task, mode) {
        (Task::Classification, WeightMode::Sbt) => 250,
        (Task::Classification, WeightMode::Dense) => 50,
        (Task::Anomaly, _) => 50,
        (Task::Forecasting, _) => 100,
    }
}

/// `[train]` table of a preset file; every field optional so user-written
/// configs can state only what they override.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub epochs_dense: Option<usize>,
    pub epochs_sbt: Option<usize>,
    pub batch_size: Option<usize>,
    pub scheduler: Option<bool>,
    pub replicates: Option<usize>,
}

impl TrainSection {
    /// Concrete training configuration for the given task/mode, falling back
    /// to global defaults for unset fields.
    pub fn resolve(&self, task: Task, mode: WeightMode) -> TrainConfig {
        let base = TrainConfig::default();
        let epochs = match mode {
            WeightMode::Dense => self.epochs_dense,
            WeightMode::Sbt => self.epochs_sbt,
        };
        TrainConfig {
            lr: self.lr.unwrap_or(base.lr),
            epochs: epochs.unwrap_or_else(|| default_epochs(task, mode)),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            seed: base.seed,
            scheduler: self.scheduler.unwrap_or(base.scheduler),
            replicates: self.replicates.unwrap_or(base.replicates),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
}

impl PresetFile {
    pub fn parse(text: &str) -> Result<Self> {
        let preset: PresetFile =
            toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        preset.model.validate()?;
        Ok(preset)
    }

    /// Resolve a preset name or a TOML config path.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if let Some(text) = builtin(name_or_path) {
            return PresetFile::parse(text);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::config(format!(
                "'{name_or_path}' is neither a shipped preset ({}) nor a config file",
                PRESET_NAMES.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("reading {}: {e}", path.display())))?;
        PresetFile::parse(&text)
    }
}
