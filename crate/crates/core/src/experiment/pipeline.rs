use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::config::{AugmentMode, ExperimentConfig, Setting};
use super::grid::export_traces;
use super::{write_file, ExperimentError};
use crate::aae::{loss_curve_text, Aae, AaeTrainConfig};
use crate::classifier::{history_csv, AttentionTrace, TrainConfig, Transformer};
use crate::ingest::{
    compute_stats, normalize, save_stream, segment_length_distribution, segment_runs, ActivitySegment, ChannelStats, LabeledStream,
};
use crate::labels::{LabelSet, NUM_CLASSES, NUM_GENERATED_CLASSES};
use crate::metrics::{confusion_matrix, MetricsReport};
use crate::numeric::derive_seed;
use crate::windowing::{make_windows, split_stream, WindowedDataset};

/// Labels of the independent random streams derived from a run's master seed.
pub const STAGES: [&str; 6] =
    ["classifier/init", "classifier/train", "aae/init", "aae/train", "aae/generate", "reorder"];

/// Sub-seed of `stage` under `master`. Panics on a label outside [`STAGES`].
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    assert!(STAGES.contains(&stage), "unknown stage `{stage}`");
    derive_seed(master, stage)
}

/// Seed-independent data shared by every cell: the normalized splits and their windows.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub stats: ChannelStats,
    pub train: LabeledStream,
    pub val: LabeledStream,
    pub test: LabeledStream,
    pub train_segments: Vec<ActivitySegment>,
    pub train_windows: WindowedDataset,
    pub val_windows: WindowedDataset,
    pub test_windows: WindowedDataset,
}

impl PreparedData {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let combined = cfg.data.combine(&cfg.data.workers()?)?;
        let splits = split_stream(&combined, cfg.split.val, cfg.split.test)?;
        let stats = compute_stats(&splits.train)?;
        let train = normalize(&splits.train, &stats)?;
        let val = normalize(splits.val.as_ref().expect("val fraction is positive"), &stats)?;
        let test = normalize(splits.test.as_ref().expect("test fraction is positive"), &stats)?;
        Ok(Self {
            stats,
            train_segments: segment_runs(&train),
            train_windows: make_windows(&train, &cfg.window)?,
            val_windows: make_windows(&val, &cfg.window)?,
            test_windows: make_windows(&test, &cfg.window)?,
            train,
            val,
            test,
        })
    }

    /// Write the three normalized splits as stream CSVs under `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
        for (name, s) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            save_stream(s, dir.join(format!("{name}.csv")))?;
        }
        Ok(())
    }
}

/// Outcome of one (setting, seed) cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub setting: Setting,
    pub seed: u64,
    pub mode: AugmentMode,
    pub report: MetricsReport,
    pub train_windows: usize,
    pub generated_frames: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// SHA-256 of the evaluation windows.
    pub test_hash: String,
    pub run_dir: PathBuf,
    /// Artifact name to path.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub trace_files: Vec<PathBuf>,
    pub config: ExperimentConfig,
    #[serde(skip)]
    pub traces: Vec<AttentionTrace>,
}

impl RunRecord {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every artifact and trace path the record references.
    pub fn referenced_files(&self) -> impl Iterator<Item = &Path> {
        self.artifacts.values().chain(&self.trace_files).map(PathBuf::as_path)
    }
}

struct Generated {
    aae: Aae,
    curve: Vec<f64>,
    segments: Vec<ActivitySegment>,
}

type GeneratedSlot = Arc<OnceLock<Result<Arc<Generated>, String>>>;

/// A validated configuration with its prepared data.
///
/// The generator and its segments depend only on the seed, so they are built once per
/// seed and shared by the generated settings of that seed.
pub struct Experiment {
    cfg: ExperimentConfig,
    data: PreparedData,
    generated: Mutex<BTreeMap<u64, GeneratedSlot>>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let data = PreparedData::prepare(&cfg)?;
        Ok(Self { cfg, data, generated: Mutex::new(BTreeMap::new()) })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn run_dir(&self, setting: Setting, seed: u64) -> PathBuf {
        self.cfg.output_dir.join("runs").join(format!("{setting}_seed{seed}"))
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.cfg.output_dir.join("traces")
    }

    fn generated(&self, seed: u64) -> Result<Arc<Generated>, ExperimentError> {
        let slot = self.generated.lock().expect("cache lock").entry(seed).or_default().clone();
        slot.get_or_init(|| self.generate(seed).map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(ExperimentError::Cell)
    }

    fn generate(&self, seed: u64) -> Result<Generated, ExperimentError> {
        let real = self.data.train_windows.filter_labels(|l| l < NUM_GENERATED_CLASSES);
        let mut aae = Aae::build(self.cfg.aae.clone(), stage_seed(seed, "aae/init"))?;
        let t = AaeTrainConfig { seed: stage_seed(seed, "aae/train"), ..self.cfg.aae_train.clone() };
        let curve = aae.train(&real, &t)?;
        let lengths = segment_length_distribution(&self.data.train_segments)?;
        let mix = Aae::class_mix_of(&self.data.train_segments);
        let mut rng = crate::numeric::Prng::for_stage(seed, "aae/generate");
        let segments = aae.generate_dataset(&lengths, &mix, self.cfg.generated_frames, &mut rng)?;
        Ok(Generated { aae, curve, segments })
    }

    /// Run one cell and persist its artifacts under [`run_dir`](Self::run_dir).
    pub fn run_setting(&self, setting: Setting, seed: u64) -> Result<RunRecord, ExperimentError> {
        let cfg = &self.cfg;
        let dir = self.run_dir(setting, seed);
        std::fs::create_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;
        let mut artifacts = BTreeMap::new();
        let reorder_seed = stage_seed(seed, "reorder");
        let group_count = cfg.rdss.group_count;
        let mut generated_frames = 0;

        let train = match setting.strategy() {
            None => self.data.train_windows.clone(),
            Some(strategy) if !setting.uses_generator() => {
                let stream = strategy.apply(&self.data.train_segments, reorder_seed, group_count)?;
                let path = dir.join("train_stream.csv");
                save_stream(&stream, &path)?;
                artifacts.insert("train_stream".to_string(), path);
                make_windows(&stream, &cfg.window)?
            }
            Some(strategy) => {
                let gen = self.generated(seed)?;
                let path = dir.join("aae.ckpt");
                gen.aae.save(&path)?;
                artifacts.insert("aae_checkpoint".to_string(), path);
                let path = dir.join("aae_loss.txt");
                write_file(&path, loss_curve_text(&gen.curve))?;
                artifacts.insert("aae_loss".to_string(), path);

                let stream = strategy.apply(&gen.segments, reorder_seed, group_count)?;
                generated_frames = stream.len();
                let path = dir.join("generated_stream.csv");
                save_stream(&stream, &path)?;
                artifacts.insert("generated_stream".to_string(), path);
                let synthetic = make_windows(&stream, &cfg.window)?;
                match cfg.mode {
                    AugmentMode::Append => concat(&self.data.train_windows, &synthetic),
                    AugmentMode::Replace => synthetic,
                }
            }
        };
        let train = train.with_provenance(setting.name(), seed);

        let mut model = Transformer::build(cfg.classifier.clone(), stage_seed(seed, "classifier/init"))?;
        let t = TrainConfig { seed: stage_seed(seed, "classifier/train"), ..cfg.train.clone() };
        let probe_len = self.data.val_windows.len().min(8);
        let (probe, _) = self.data.val_windows.batch(&(0..probe_len).collect::<Vec<_>>());
        let outcome = model.train(&train, &self.data.val_windows, &t, Some(&probe))?;
        let path = dir.join("history.csv");
        write_file(&path, history_csv(&outcome.history))?;
        artifacts.insert("history".to_string(), path);
        let path = dir.join("classifier.ckpt");
        model.save(&path)?;
        artifacts.insert("classifier_checkpoint".to_string(), path);

        let test = make_windows(&self.data.test, &cfg.window)?;
        let test_hash = test.content_hash();
        let pred = model.predict_dataset(&test)?;
        let cm = confusion_matrix(&test.labels, &pred, NUM_CLASSES)?;
        let report = MetricsReport::from_confusion(setting.name(), seed, &cm);
        let path = dir.join("predictions.csv");
        write_file(&path, label_column(&pred))?;
        artifacts.insert("predictions".to_string(), path);
        let path = dir.join("truth.csv");
        write_file(&path, label_column(&test.labels))?;
        artifacts.insert("truth".to_string(), path);
        let path = dir.join("test_hash.txt");
        write_file(&path, format!("{test_hash}\n"))?;
        artifacts.insert("test_hash".to_string(), path);

        let mut record = RunRecord {
            setting,
            seed,
            mode: cfg.mode,
            report,
            train_windows: train.len(),
            generated_frames,
            epochs: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            stopped_early: outcome.stopped_early,
            test_hash,
            run_dir: dir.clone(),
            artifacts,
            trace_files: Vec::new(),
            config: cfg.clone(),
            traces: outcome.traces,
        };
        record.trace_files = export_traces(std::slice::from_ref(&record), &self.traces_dir())?;
        let path = dir.join("record.json");
        record.artifacts.insert("record".to_string(), path.clone());
        write_file(&path, serde_json::to_string_pretty(&record)?)?;
        Ok(record)
    }
}

fn concat(a: &WindowedDataset, b: &WindowedDataset) -> WindowedDataset {
    let mut out = a.clone();
    out.windows.extend(b.windows.iter().cloned());
    out.labels.extend(&b.labels);
    out
}

/// One operation id per line under an `operation` header.
fn label_column(indices: &[usize]) -> String {
    let mut out = String::from("operation\n");
    for &i in indices {
        out.push_str(&format!("{}\n", LabelSet::id(i).expect("class index in range")));
    }
    out
}

/// Parse a file written by the predictions writer, or any one-id-per-line list, into
/// class indices.
pub fn read_label_column(path: &Path) -> Result<Vec<usize>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == "operation") {
            continue;
        }
        let index = line
            .parse::<u32>()
            .ok()
            .and_then(crate::labels::OperationId::new)
            .and_then(LabelSet::index)
            .ok_or_else(|| ExperimentError::Cell(format!("{}:{}: not an operation id: `{line}`", path.display(), n + 1)))?;
        out.push(index);
    }
    Ok(out)
}
