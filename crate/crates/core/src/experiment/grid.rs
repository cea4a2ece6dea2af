use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Setting};
use super::pipeline::{Experiment, RunRecord};
use super::{write_file, ExperimentError};
use crate::classifier::{AttentionTrace, Period};
use crate::metrics::{aggregate_runs, Metric, MetricsReport, ResultsTable};

/// A cell that did not produce a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub setting: Setting,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug)]
pub struct GridOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<CellFailure>,
    /// Only settings with at least one successful run appear as columns.
    pub table: ResultsTable,
    pub output_dir: PathBuf,
}

impl GridOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn run_grid(cfg: ExperimentConfig) -> Result<GridOutcome, ExperimentError> {
    run_grid_with(cfg, |exp, setting, seed| exp.run_setting(setting, seed))
}

/// Run every (setting, seed) cell with `run_cell`, in parallel, then write the summary.
/// Cell errors are collected rather than propagated.
pub fn run_grid_with<F>(cfg: ExperimentConfig, run_cell: F) -> Result<GridOutcome, ExperimentError>
where
    F: Fn(&Experiment, Setting, u64) -> Result<RunRecord, ExperimentError> + Sync,
{
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    write_file(&out.join("resolved_config.toml"), cfg.to_toml()?)?;
    let exp = Experiment::new(cfg)?;
    exp.data().persist(&out.join("data"))?;

    let settings = exp.config().ordered_settings();
    let cells: Vec<(Setting, u64)> =
        settings.iter().flat_map(|&s| exp.config().seeds.iter().map(move |&seed| (s, seed))).collect();
    let results: Vec<_> = cells.par_iter().map(|&(s, seed)| ((s, seed), run_cell(&exp, s, seed))).collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((setting, seed), r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(CellFailure { setting, seed, error: e.to_string() }),
        }
    }
    let reports: Vec<MetricsReport> = records.iter().map(|r| r.report.clone()).collect();
    let table = table_of(&reports)?;

    let mut results_csv = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in &reports {
        results_csv.push_str(&r.csv_line());
        results_csv.push('\n');
    }
    write_file(&out.join("results.csv"), results_csv)?;
    write_file(&out.join("summary.csv"), render_summary_csv(&table))?;
    write_file(&out.join("summary.txt"), table.render_text())?;
    let failures_path = out.join("failures.csv");
    if failures.is_empty() {
        let _ = std::fs::remove_file(&failures_path);
    } else {
        let mut text = String::from("setting,seed,error\n");
        for f in &failures {
            let _ = writeln!(text, "{},{},\"{}\"", f.setting, f.seed, f.error.replace('"', "'"));
        }
        write_file(&failures_path, text)?;
    }
    Ok(GridOutcome { records, failures, table, output_dir: out })
}

fn table_of(reports: &[MetricsReport]) -> Result<ResultsTable, ExperimentError> {
    let present: Vec<String> = Setting::ALL
        .iter()
        .map(|s| s.name().to_string())
        .filter(|s| reports.iter().any(|r| &r.setting == s))
        .collect();
    Ok(aggregate_runs(reports, &present)?)
}

/// The table with a model row and a setting row over the metric rows.
pub fn render_summary_csv(table: &ResultsTable) -> String {
    let heads: Vec<(&str, &str)> = table
        .settings
        .iter()
        .map(|s| s.parse::<Setting>().map(Setting::model_and_column).unwrap_or(("", s.as_str())))
        .collect();
    let mut out = String::new();
    let models: Vec<&str> = heads.iter().map(|h| h.0).collect();
    let columns: Vec<&str> = heads.iter().map(|h| h.1).collect();
    let _ = writeln!(out, "Model,{}", models.join(","));
    let _ = writeln!(out, "Setting,{}", columns.join(","));
    for (m, row) in Metric::ALL.iter().zip(&table.cells) {
        let cells: Vec<String> = row.iter().map(|c| c.render()).collect();
        let _ = writeln!(out, "{},{}", m.label(), cells.join(","));
    }
    out
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<MetricsReport>, ExperimentError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MetricsReport::CSV_HEADER) {
        return Err(ExperimentError::Cell(format!("{}: missing results header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            MetricsReport::parse_csv_line(l)
                .ok_or_else(|| ExperimentError::Cell(format!("{}: bad results line `{l}`", path.display())))
        })
        .collect()
}

/// Rebuild the summary table from a persisted `results.csv`.
pub fn summary_from_results(path: impl AsRef<Path>) -> Result<ResultsTable, ExperimentError> {
    table_of(&read_results(path)?)
}

pub fn trace_file_name(setting: Setting, seed: u64, period: Period, layer: usize, head: usize) -> String {
    format!("trace_{setting}_{seed}_{period}_L{layer}_H{head}.txt")
}

/// Write one matrix file per trace of every record; returns the paths in record order.
pub fn export_traces(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let mut paths = Vec::new();
    for r in records {
        for t in &r.traces {
            let path = dir.join(trace_file_name(r.setting, r.seed, t.period, t.layer, t.head));
            write_file(&path, render_matrix(t))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

fn render_matrix(t: &AttentionTrace) -> String {
    let cols = t.weights.shape()[1];
    let mut out = String::new();
    for row in t.weights.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

/// Parse a trace file back into rows.
pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>, ExperimentError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    text.lines()
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| ExperimentError::Cell(format!("{}: {e}", path.display()))))
                .collect()
        })
        .collect()
}
