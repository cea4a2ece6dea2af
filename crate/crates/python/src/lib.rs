//! Python bindings: streams, reordering, windowing, metrics and the experiment grid.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sos_core::experiment::{self, AugmentMode, ExperimentConfig, ExperimentError, Setting};
use sos_core::ingest::{self, combine_workers, segment_runs, synth_worker, LabeledStream, SynthWorkerSpec};
use sos_core::labels::{LabelSet, OperationId, NUM_CLASSES};
use sos_core::metrics::{confusion_matrix, MetricsReport};
use sos_core::reorder::Strategy;
use sos_core::windowing::{make_windows, WindowConfig};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn experiment_err(e: ExperimentError) -> PyErr {
    match e {
        e if e.is_config() => PyValueError::new_err(e.to_string()),
        e @ ExperimentError::Io { .. } => PyIOError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn class_index(raw: u32) -> PyResult<usize> {
    OperationId::new(raw).and_then(LabelSet::index).ok_or_else(|| value_err(format!("unknown operation id {raw}")))
}

/// A labeled accelerometer stream.
#[pyclass(name = "Stream", module = "sos_py", from_py_object)]
#[derive(Clone)]
struct PyStream {
    inner: LabeledStream,
}

#[pymethods]
impl PyStream {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ingest::load_stream(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    /// Synthetic desk-scale worker recording.
    #[staticmethod]
    #[pyo3(signature = (seed, duration, variant = 0))]
    fn synth_desk(seed: u64, duration: usize, variant: u32) -> PyResult<Self> {
        synth_worker(&SynthWorkerSpec::desk(seed, duration, variant)).map(|inner| Self { inner }).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ingest::save_stream(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Stream(frames={}, segments={})", self.inner.len(), segment_runs(&self.inner).len())
    }

    fn timestamps(&self) -> Vec<i64> {
        self.inner.frames().iter().map(|f| f.timestamp).collect()
    }

    fn acc(&self) -> Vec<[f64; 3]> {
        self.inner.frames().iter().map(|f| f.acc).collect()
    }

    /// Operation id of every frame.
    fn labels(&self) -> Vec<u32> {
        self.inner.labels().map(OperationId::raw).collect()
    }

    /// `(operation id, length)` of every maximal same-label run.
    fn segments(&self) -> Vec<(u32, usize)> {
        segment_runs(&self.inner).iter().map(|s| (s.label().raw(), s.len())).collect()
    }

    /// This stream followed by `other`, shifted to continue at this stream's median gap.
    fn combine(&self, other: &PyStream) -> PyResult<Self> {
        combine_workers(&self.inner, &other.inner).map(|inner| Self { inner }).map_err(value_err)
    }

    /// Reorder segments with `rs`, `as` or `rdss`.
    #[pyo3(signature = (strategy, seed = 0, groups = 16))]
    fn reorder(&self, strategy: &str, seed: u64, groups: usize) -> PyResult<Self> {
        let strategy: Strategy = strategy.parse().map_err(value_err)?;
        strategy.apply(&segment_runs(&self.inner), seed, groups).map(|inner| Self { inner }).map_err(value_err)
    }

    /// Overlapping windows as `(windows, operation ids)` with windows `[n][window_len][3]`.
    #[pyo3(signature = (window_len = 300, stride = 150))]
    fn windows(&self, window_len: usize, stride: usize) -> PyResult<(Vec<Vec<[f64; 3]>>, Vec<u32>)> {
        let cfg = WindowConfig::new(window_len, stride).map_err(value_err)?;
        let ds = make_windows(&self.inner, &cfg).map_err(value_err)?;
        let windows = ds.windows.iter().map(|w| w.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).collect();
        let labels = ds.labels.iter().map(|&i| LabelSet::id(i).expect("class index").raw()).collect();
        Ok((windows, labels))
    }
}

/// A validated experiment configuration.
#[pyclass(name = "Config", module = "sos_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml(text).map(|inner| Self { inner }).map_err(experiment_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| Self { inner }).map_err(experiment_err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(experiment_err)
    }

    #[getter]
    fn settings(&self) -> Vec<String> {
        self.inner.settings.iter().map(|s| s.name().to_string()).collect()
    }

    #[setter]
    fn set_settings(&mut self, names: Vec<String>) -> PyResult<()> {
        self.inner.settings = names.iter().map(|n| n.parse::<Setting>()).collect::<Result<_, _>>().map_err(value_err)?;
        self.inner.validate().map_err(experiment_err)
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) -> PyResult<()> {
        self.inner.seeds = seeds;
        self.inner.validate().map_err(experiment_err)
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.mode = mode.parse::<AugmentMode>().map_err(value_err)?;
        Ok(())
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("setting", &r.setting)?;
    d.set_item("seed", r.seed)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("macro_f1", r.macro_f1)?;
    Ok(d)
}

/// Accuracy and macro precision, recall and F1 of operation-id lists.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, truth: Vec<u32>, pred: Vec<u32>) -> PyResult<Bound<'py, PyDict>> {
    let t = truth.into_iter().map(class_index).collect::<PyResult<Vec<_>>>()?;
    let p = pred.into_iter().map(class_index).collect::<PyResult<Vec<_>>>()?;
    let cm = confusion_matrix(&t, &p, NUM_CLASSES).map_err(value_err)?;
    report_dict(py, &MetricsReport::from_confusion("eval", 0, &cm))
}

#[pyfunction]
#[pyo3(signature = (n, window_len = 300, stride = 150))]
fn window_count(n: usize, window_len: usize, stride: usize) -> PyResult<usize> {
    Ok(WindowConfig::new(window_len, stride).map_err(value_err)?.count(n))
}

/// Run the full grid. Returns per-run metrics, failed cells and the rendered summary.
#[pyfunction]
fn run_grid<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let outcome = py.detach(move || experiment::run_grid(cfg)).map_err(experiment_err)?;
    let runs = outcome.records.iter().map(|r| report_dict(py, &r.report)).collect::<PyResult<Vec<_>>>()?;
    let failures: Vec<(String, u64, String)> =
        outcome.failures.iter().map(|f| (f.setting.to_string(), f.seed, f.error.clone())).collect();
    let d = PyDict::new(py);
    d.set_item("runs", runs)?;
    d.set_item("failures", failures)?;
    d.set_item("summary", outcome.table.render_text())?;
    d.set_item("summary_csv", experiment::render_summary_csv(&outcome.table))?;
    d.set_item("output_dir", outcome.output_dir)?;
    Ok(d)
}

#[pymodule]
fn sos_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStream>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(window_count, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    m.add("SETTINGS", Setting::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    m.add("OPERATION_IDS", LabelSet::IDS.iter().map(|id| id.raw()).collect::<Vec<_>>())?;
    Ok(())
}
