//! Confusion matrices, macro averaged scores and mean (std) aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("truth has {truth} entries, predictions {pred}")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("class {class} out of range 0..{k}")]
    OutOfRange { class: usize, k: usize },
    #[error("no reports for setting `{0}`")]
    EmptyGroup(String),
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.len() != k * k {
            return Err(MetricsError::LengthMismatch { truth: k * k, pred: counts.len() });
        }
        if counts.iter().sum::<u64>() == 0 {
            return Err(MetricsError::Empty);
        }
        Ok(Self { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|j| self.get(c, j)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, c)).sum()
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in truth.iter().zip(pred) {
        for class in [t, p] {
            if class >= k {
                return Err(MetricsError::OutOfRange { class, k });
            }
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1, with 0 for every zero denominator.
pub fn per_class_scores(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.k)
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassScores { precision, recall, f1, support: cm.row_sum(c) }
        })
        .collect()
}

/// Unweighted means over classes with at least one true sample.
pub fn macro_scores(cm: &ConfusionMatrix) -> MacroScores {
    macro_from_per_class(&per_class_scores(cm))
}

pub fn macro_from_per_class(per_class: &[ClassScores]) -> MacroScores {
    let present: Vec<&ClassScores> = per_class.iter().filter(|s| s.support > 0).collect();
    let n = present.len().max(1) as f64;
    MacroScores {
        precision: present.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: present.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: present.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace(), cm.total())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: String,
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
}

impl MetricsReport {
    pub fn from_confusion(setting: impl Into<String>, seed: u64, cm: &ConfusionMatrix) -> Self {
        let per_class = per_class_scores(cm);
        let m = macro_from_per_class(&per_class);
        Self {
            setting: setting.into(),
            seed,
            accuracy: accuracy(cm),
            precision: m.precision,
            recall: m.recall,
            macro_f1: m.f1,
            per_class,
        }
    }

    pub const CSV_HEADER: &'static str = "setting,seed,accuracy,precision,recall,macro_f1";

    /// One comma-separated line, full precision.
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.setting, self.seed, self.accuracy, self.precision, self.recall, self.macro_f1)
    }

    /// Parse a line produced by [`csv_line`](Self::csv_line). Per-class scores are not
    /// part of the line and come back empty.
    pub fn parse_csv_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(Self {
            setting: f[0].to_string(),
            seed: f[1].parse().ok()?,
            accuracy: f[2].parse().ok()?,
            precision: f[3].parse().ok()?,
            recall: f[4].parse().ok()?,
            macro_f1: f[5].parse().ok()?,
            per_class: Vec::new(),
        })
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::MacroF1 => self.macro_f1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    MacroF1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::MacroF1];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "Accuracy",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::MacroF1 => "Macro F1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), runs: values.len() }
    }

    /// `"0.70 (0.03)"`.
    pub fn render(&self) -> String {
        format!("{:.2} ({:.2})", self.mean, self.std)
    }
}

/// One column per setting, one row per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub settings: Vec<String>,
    /// `cells[metric][setting]`, metrics in [`Metric::ALL`] order.
    pub cells: Vec<Vec<MeanStd>>,
}

impl ResultsTable {
    pub fn cell(&self, metric: Metric, setting: &str) -> Option<MeanStd> {
        let m = Metric::ALL.iter().position(|&x| x == metric)?;
        let s = self.settings.iter().position(|x| x == setting)?;
        Some(self.cells[m][s])
    }

    pub fn render_csv(&self) -> String {
        let mut out = format!("Setting,{}\n", self.settings.join(","));
        for (m, row) in Metric::ALL.iter().zip(&self.cells) {
            let cells: Vec<String> = row.iter().map(MeanStd::render).collect();
            out.push_str(&format!("{},{}\n", m.label(), cells.join(",")));
        }
        out
    }

    pub fn render_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![std::iter::once("Setting".to_string()).chain(self.settings.iter().cloned()).collect()];
        for (m, row) in Metric::ALL.iter().zip(&self.cells) {
            rows.push(std::iter::once(m.label().to_string()).chain(row.iter().map(MeanStd::render)).collect());
        }
        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Mean (std) per metric per setting. `settings` fixes the column order; every setting
/// must have at least one report.
pub fn aggregate_runs(reports: &[MetricsReport], settings: &[String]) -> Result<ResultsTable, MetricsError> {
    let mut cells = vec![Vec::with_capacity(settings.len()); Metric::ALL.len()];
    for s in settings {
        let group: Vec<&MetricsReport> = reports.iter().filter(|r| &r.setting == s).collect();
        if group.is_empty() {
            return Err(MetricsError::EmptyGroup(s.clone()));
        }
        for (row, &m) in cells.iter_mut().zip(Metric::ALL.iter()) {
            let values: Vec<f64> = group.iter().map(|r| r.metric(m)).collect();
            row.push(MeanStd::of(&values));
        }
    }
    Ok(ResultsTable { settings: settings.to_vec(), cells })
}
