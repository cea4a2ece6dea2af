//! Experiment configuration, the setting grid and result persistence.

mod config;
mod grid;
mod pipeline;

pub use config::{AugmentMode, DataConfig, DeskPreset, ExperimentConfig, RdssSection, Setting};
pub use grid::{
    export_traces, read_results, read_trace, render_summary_csv, run_grid, run_grid_with, summary_from_results, trace_file_name,
    CellFailure, GridOutcome,
};
pub use pipeline::{read_label_column, stage_seed, Experiment, PreparedData, RunRecord, STAGES};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
    #[error(transparent)]
    Window(#[from] crate::windowing::WindowError),
    #[error(transparent)]
    Reorder(#[from] crate::reorder::ReorderError),
    #[error(transparent)]
    Aae(#[from] crate::aae::AaeError),
    #[error(transparent)]
    Classifier(#[from] crate::classifier::ClassifierError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Cell(String),
}

impl ExperimentError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ExperimentError::Io { path: path.display().to_string(), source }
    }

    /// Whether the error comes from the configuration rather than from running a cell.
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Parse(_) | ExperimentError::Invalid { .. })
    }
}

pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| ExperimentError::io(path, e))
}
