use serde::{Deserialize, Serialize};

use super::{Frame, IngestError, LabeledStream};

/// Per-axis mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self, IngestError> {
        for (axis, &s) in std.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(IngestError::ZeroVariance { axis });
            }
        }
        Ok(Self { mean, std })
    }

    /// Inverse of [`normalize`] for a single frame's axes.
    pub fn denormalize(&self, acc: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| acc[k] * self.std[k] + self.mean[k])
    }
}

pub fn compute_stats(s: &LabeledStream) -> Result<ChannelStats, IngestError> {
    if s.is_empty() {
        return Err(IngestError::Empty);
    }
    let n = s.len() as f64;
    let mut mean = [0.0; 3];
    for f in s.frames() {
        for k in 0..3 {
            mean[k] += f.acc[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 3];
    for f in s.frames() {
        for k in 0..3 {
            let d = f.acc[k] - mean[k];
            var[k] += d * d;
        }
    }
    ChannelStats::new(mean, var.map(|v| (v / n).sqrt()))
}

/// Per-axis z-score; timestamps and labels untouched.
pub fn normalize(s: &LabeledStream, stats: &ChannelStats) -> Result<LabeledStream, IngestError> {
    let stats = ChannelStats::new(stats.mean, stats.std)?;
    let frames = s
        .frames()
        .iter()
        .map(|f| Frame {
            acc: std::array::from_fn(|k| (f.acc[k] - stats.mean[k]) / stats.std[k]),
            ..*f
        })
        .collect();
    LabeledStream::new(frames)
}
