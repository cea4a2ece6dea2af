//! Fixed-length overlapping windows and chronological train/val/test splits.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{segment_runs, IngestError, LabeledStream};
use crate::labels::{OperationId, NUM_CLASSES};
use crate::numeric::Tensor;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("stream has {len} frames, shorter than the window length {window_len}")]
    TooShort { len: usize, window_len: usize },
    #[error("invalid window config: stride {stride} must be in 1..={window_len}")]
    InvalidConfig { window_len: usize, stride: usize },
    #[error("invalid split fractions: val {val}, test {test}")]
    InvalidFractions { val: f64, test: f64 },
    #[error("the {0} split received no segments")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub window_len: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window_len: 300, stride: 150 }
    }
}

impl WindowConfig {
    pub fn new(window_len: usize, stride: usize) -> Result<Self, WindowError> {
        let cfg = Self { window_len, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), WindowError> {
        if self.stride < 1 || self.stride > self.window_len {
            return Err(WindowError::InvalidConfig { window_len: self.window_len, stride: self.stride });
        }
        Ok(())
    }

    /// `floor((n - window_len) / stride) + 1`, or 0 if the stream is too short.
    pub fn count(&self, n: usize) -> usize {
        if n < self.window_len {
            0
        } else {
            (n - self.window_len) / self.stride + 1
        }
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub setting: String,
    pub seed: u64,
}

/// Windows of shape `window_len x 3` with one class index each.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub windows: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub window_len: usize,
    pub provenance: Provenance,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn with_provenance(mut self, setting: impl Into<String>, seed: u64) -> Self {
        self.provenance = Provenance { setting: setting.into(), seed };
        self
    }

    /// Stack windows `idx` into a `[batch, window_len, 3]` tensor.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.window_len * 3);
        for &i in idx {
            data.extend_from_slice(self.windows[i].data());
        }
        let x = Tensor::new(vec![idx.len(), self.window_len, 3], data).expect("windows share one shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Subset containing only windows whose label satisfies `keep`.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> Self {
        let (windows, labels) = self
            .windows
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| keep(l))
            .map(|(w, &l)| (w.clone(), l))
            .unzip();
        Self { windows, labels, window_len: self.window_len, provenance: self.provenance.clone() }
    }

    /// SHA-256 over window values (bit patterns) and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (w, &l) in self.windows.iter().zip(&self.labels) {
            for v in w.data() {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Majority label of a window; ties go to the label that occurs first.
pub fn window_label(frame_labels: &[OperationId]) -> usize {
    let mut counts = [0usize; NUM_CLASSES];
    let mut first_seen = [usize::MAX; NUM_CLASSES];
    for (pos, l) in frame_labels.iter().enumerate() {
        let c = l.index();
        counts[c] += 1;
        first_seen[c] = first_seen[c].min(pos);
    }
    (0..NUM_CLASSES)
        .filter(|&c| counts[c] > 0)
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(first_seen[b].cmp(&first_seen[a])))
        .unwrap_or(0)
}

/// Window `k` covers frames `[k * stride, k * stride + window_len)`; trailing frames that
/// do not fill a window are dropped.
pub fn make_windows(s: &LabeledStream, cfg: &WindowConfig) -> Result<WindowedDataset, WindowError> {
    cfg.validate()?;
    if s.len() < cfg.window_len {
        return Err(WindowError::TooShort { len: s.len(), window_len: cfg.window_len });
    }
    let frames = s.frames();
    let n = cfg.count(s.len());
    let mut windows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut frame_labels = Vec::with_capacity(cfg.window_len);
    for k in 0..n {
        let slice = &frames[k * cfg.stride..k * cfg.stride + cfg.window_len];
        let data: Vec<f64> = slice.iter().flat_map(|f| f.acc).collect();
        windows.push(Tensor::new(vec![cfg.window_len, 3], data).expect("window_len x 3"));
        frame_labels.clear();
        frame_labels.extend(slice.iter().map(|f| f.label));
        labels.push(window_label(&frame_labels));
    }
    Ok(WindowedDataset { windows, labels, window_len: cfg.window_len, provenance: Provenance::default() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { val: 0.1, test: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledStream,
    pub val: Option<LabeledStream>,
    pub test: Option<LabeledStream>,
}

/// Chronological tail split. Cut points snap backward to the start of the segment they
/// fall in, so no segment straddles two splits. A split with fraction 0 is `None`.
pub fn split_stream(s: &LabeledStream, val_frac: f64, test_frac: f64) -> Result<Splits, WindowError> {
    let valid = |f: f64| f.is_finite() && f >= 0.0;
    if !valid(val_frac) || !valid(test_frac) || val_frac + test_frac >= 1.0 {
        return Err(WindowError::InvalidFractions { val: val_frac, test: test_frac });
    }
    let n = s.len();
    let mut starts = Vec::new();
    let mut offset = 0;
    for seg in segment_runs(s) {
        starts.push(offset);
        offset += seg.len();
    }
    let snap = |cut: usize| -> usize {
        let i = starts.partition_point(|&b| b <= cut);
        starts[i - 1]
    };

    let test_len = (n as f64 * test_frac).round() as usize;
    let val_len = (n as f64 * val_frac).round() as usize;
    let test_cut = match (test_frac > 0.0, test_len) {
        (false, _) => n,
        (true, 0) => return Err(WindowError::EmptySplit("test")),
        (true, len) => snap(n - len),
    };
    let val_cut = match (val_frac > 0.0, val_len) {
        (false, _) => test_cut,
        (true, 0) => return Err(WindowError::EmptySplit("val")),
        (true, len) => snap(test_cut.saturating_sub(len)),
    };
    if val_cut == 0 {
        return Err(WindowError::EmptySplit("train"));
    }
    let part = |a: usize, b: usize| -> Result<Option<LabeledStream>, WindowError> {
        if a == b {
            Ok(None)
        } else {
            Ok(Some(s.slice(a..b)?))
        }
    };
    Ok(Splits {
        train: s.slice(0..val_cut)?,
        val: part(val_cut, test_cut)?,
        test: part(test_cut, n)?,
    })
}
