use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::aae::{AaeConfig, AaeTrainConfig};
use crate::classifier::{TrainConfig, TransformerConfig};
use crate::ingest::{combine_workers, load_stream, synth_worker, CombineSpec, LabeledStream, SynthWorkerSpec};
use crate::reorder::Strategy;
use crate::windowing::{SplitFractions, WindowConfig};

/// One column of the results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    AaeRs,
    AaeAs,
    AaeRdss,
    OrigRs,
    OrigAs,
    Wda,
}

impl Setting {
    /// Canonical column order.
    pub const ALL: [Setting; 6] =
        [Setting::AaeRs, Setting::AaeAs, Setting::AaeRdss, Setting::OrigRs, Setting::OrigAs, Setting::Wda];

    pub fn name(self) -> &'static str {
        match self {
            Setting::AaeRs => "AAE-RS",
            Setting::AaeAs => "AAE-AS",
            Setting::AaeRdss => "AAE-RDSS",
            Setting::OrigRs => "ORIG-RS",
            Setting::OrigAs => "ORIG-AS",
            Setting::Wda => "WDA",
        }
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Setting::AaeRs | Setting::AaeAs | Setting::AaeRdss)
    }

    /// Reordering applied to the training segments, if any.
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Setting::AaeRs | Setting::OrigRs => Some(Strategy::Random),
            Setting::AaeAs | Setting::OrigAs => Some(Strategy::Ascending),
            Setting::AaeRdss => Some(Strategy::GroupedAscending),
            Setting::Wda => None,
        }
    }

    /// The two header rows of the summary table.
    pub fn model_and_column(self) -> (&'static str, &'static str) {
        match self {
            Setting::AaeRs => ("AAE", "RS"),
            Setting::AaeAs => ("AAE", "AS"),
            Setting::AaeRdss => ("AAE", "RDSS"),
            Setting::OrigRs => ("Original Data", "RS"),
            Setting::OrigAs => ("Original Data", "AS"),
            Setting::Wda => ("Original Data", "WDA"),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setting::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown setting `{s}` (expected one of AAE-RS, AAE-AS, AAE-RDSS, ORIG-RS, ORIG-AS, WDA)"))
    }
}

impl TryFrom<String> for Setting {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.name().to_string()
    }
}

/// Whether generated windows extend or replace the real training windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    #[default]
    Append,
    Replace,
}

impl FromStr for AugmentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "append" => Ok(AugmentMode::Append),
            "replace" => Ok(AugmentMode::Replace),
            other => Err(format!("unknown mode `{other}` (expected append or replace)")),
        }
    }
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentMode::Append => "append",
            AugmentMode::Replace => "replace",
        })
    }
}

/// Built-in synthetic workers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskPreset {
    pub workers: usize,
    pub duration: usize,
    pub seed: u64,
    /// Multiplies every class's segment-length parameters; below 1 gives more transitions.
    #[serde(default = "one")]
    pub length_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl DeskPreset {
    pub fn specs(&self) -> Vec<SynthWorkerSpec> {
        (0..self.workers)
            .map(|w| {
                let mut spec = SynthWorkerSpec::desk(self.seed.wrapping_add(w as u64), self.duration, w as u32);
                for c in &mut spec.classes {
                    c.len_mean *= self.length_scale;
                    c.len_std *= self.length_scale;
                    c.len_min = ((c.len_min as f64 * self.length_scale).round() as usize).max(1);
                }
                spec
            })
            .collect()
    }
}

/// Exactly one of `paths`, `synth` or `desk` supplies the worker pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synth: Vec<SynthWorkerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desk: Option<DeskPreset>,
    #[serde(default = "default_combine")]
    pub combine: CombineSpec,
}

fn default_combine() -> CombineSpec {
    CombineSpec { worker_ids: (0, 1), seed: 0 }
}

impl DataConfig {
    pub fn worker_count(&self) -> usize {
        self.paths.len() + self.synth.len() + self.desk.as_ref().map_or(0, |d| d.workers)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let sources = [!self.paths.is_empty(), !self.synth.is_empty(), self.desk.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(invalid("data", "exactly one of `paths`, `synth` or `desk` must be given"));
        }
        let (i, j) = self.combine.worker_ids;
        CombineSpec::new(i, j, self.combine.seed).map_err(|e| invalid("data.combine", e.to_string()))?;
        if i.max(j) >= self.worker_count() {
            return Err(invalid("data.combine", format!("worker ids ({i}, {j}) but only {} workers", self.worker_count())));
        }
        if let Some(desk) = &self.desk {
            if !(desk.length_scale > 0.0) {
                return Err(invalid("data.desk.length_scale", "must be positive"));
            }
        }
        for spec in self.synth.iter().cloned().chain(self.desk.iter().flat_map(DeskPreset::specs)) {
            spec.validate().map_err(|e| invalid("data.synth", e.to_string()))?;
        }
        Ok(())
    }

    /// Load or synthesize every worker in pool order.
    pub fn workers(&self) -> Result<Vec<LabeledStream>, ExperimentError> {
        let mut pool = Vec::with_capacity(self.worker_count());
        for p in &self.paths {
            pool.push(load_stream(p).map_err(|e| ExperimentError::Cell(format!("{}: {e}", p.display())))?);
        }
        for spec in self.synth.iter().cloned().chain(self.desk.iter().flat_map(|p| p.specs())) {
            pool.push(synth_worker(&spec)?);
        }
        Ok(pool)
    }

    /// The two selected workers of `pool`, concatenated.
    pub fn combine(&self, pool: &[LabeledStream]) -> Result<LabeledStream, ExperimentError> {
        let (i, j) = self.combine.worker_ids;
        Ok(combine_workers(&pool[i], &pool[j])?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdssSection {
    pub group_count: usize,
}

impl Default for RdssSection {
    fn default() -> Self {
        Self { group_count: 16 }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub settings: Vec<Setting>,
    #[serde(default)]
    pub mode: AugmentMode,
    /// Frames the generator emits per run; required for generated settings.
    #[serde(default)]
    pub generated_frames: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub classifier: TransformerConfig,
    /// `seed` is ignored; per-run seeds derive from the master seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub aae: AaeConfig,
    /// `seed` is ignored; per-run seeds derive from the master seed.
    #[serde(default)]
    pub aae_train: AaeTrainConfig,
    #[serde(default)]
    pub rdss: RdssSection,
}

fn invalid(field: &'static str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid { field, message: message.into() }
}

impl ExperimentConfig {
    /// Parse TOML, filling defaults and rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string(self).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    /// Read and validate a config file. Relative data paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.data.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.data.validate()?;
        if self.settings.is_empty() {
            return Err(invalid("settings", "at least one setting is required"));
        }
        let mut uniq = self.settings.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != self.settings.len() {
            return Err(invalid("settings", "duplicate setting"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.settings.iter().any(|s| s.uses_generator()) && self.generated_frames == 0 {
            return Err(invalid("generated_frames", "must be positive when an AAE setting is present"));
        }
        self.window.validate().map_err(|e| invalid("window", e.to_string()))?;
        if !(self.split.val > 0.0) {
            return Err(invalid("split.val", "a validation split is required for early stopping"));
        }
        if !(self.split.test > 0.0) {
            return Err(invalid("split.test", "a test split is required for evaluation"));
        }
        if self.split.val + self.split.test >= 1.0 {
            return Err(invalid("split", "val + test must be below 1"));
        }
        self.classifier.validate().map_err(|e| invalid("classifier", e.to_string()))?;
        if self.classifier.window_len != self.window.window_len {
            return Err(invalid("classifier.window_len", "must equal window.window_len"));
        }
        if self.classifier.classes != crate::labels::NUM_CLASSES {
            return Err(invalid("classifier.classes", format!("must be {}", crate::labels::NUM_CLASSES)));
        }
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        self.aae.validate().map_err(|e| invalid("aae", e.to_string()))?;
        if self.aae.window_len != self.window.window_len {
            return Err(invalid("aae.window_len", "must equal window.window_len"));
        }
        self.aae_train.validate().map_err(|e| invalid("aae_train", e.to_string()))?;
        if self.rdss.group_count == 0 {
            return Err(invalid("rdss.group_count", "must be at least 1"));
        }
        Ok(())
    }

    /// Column order of the results table: configured settings in canonical order.
    pub fn ordered_settings(&self) -> Vec<Setting> {
        Setting::ALL.into_iter().filter(|s| self.settings.contains(s)).collect()
    }
}
