use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::labels::OperationId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    /// Milliseconds.
    pub timestamp: i64,
    pub acc: [f64; 3],
    pub label: OperationId,
}

/// Non-empty, strictly time-ordered sequence of labeled frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStream {
    frames: Vec<Frame>,
}

impl LabeledStream {
    pub fn new(frames: Vec<Frame>) -> Result<Self, IngestError> {
        if frames.is_empty() {
            return Err(IngestError::Empty);
        }
        for (i, w) in frames.windows(2).enumerate() {
            if w[1].timestamp <= w[0].timestamp {
                return Err(IngestError::NonIncreasingTimestamp {
                    index: i + 1,
                    previous: w[0].timestamp,
                    current: w[1].timestamp,
                });
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = OperationId> + '_ {
        self.frames.iter().map(|f| f.label)
    }

    pub fn first_timestamp(&self) -> i64 {
        self.frames[0].timestamp
    }

    pub fn last_timestamp(&self) -> i64 {
        self.frames[self.frames.len() - 1].timestamp
    }

    /// Median of consecutive timestamp differences, 1 for single-frame streams.
    pub fn median_gap(&self) -> i64 {
        median_gap(
            self.frames
                .windows(2)
                .map(|w| w[1].timestamp - w[0].timestamp),
        )
    }

    /// Contiguous sub-range of frames, kept as a stream.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self, IngestError> {
        Self::new(self.frames[range].to_vec())
    }
}

/// Median of the given gaps (mean of the two middle values, floored, for even counts).
pub(crate) fn median_gap(gaps: impl Iterator<Item = i64>) -> i64 {
    let mut gaps: Vec<i64> = gaps.collect();
    if gaps.is_empty() {
        return 1;
    }
    gaps.sort_unstable();
    let n = gaps.len();
    let m = if n % 2 == 1 {
        gaps[n / 2]
    } else {
        (gaps[n / 2 - 1] + gaps[n / 2]).div_euclid(2)
    };
    m.max(1)
}

/// Median of consecutive timestamp gaps inside segments (never across them).
pub fn median_gap_of_segments(segs: &[ActivitySegment]) -> i64 {
    median_gap(segs.iter().flat_map(|s| s.frames().windows(2).map(|w| w[1].timestamp - w[0].timestamp)))
}

/// Maximal contiguous run of frames sharing one label.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivitySegment {
    label: OperationId,
    frames: Vec<Frame>,
}

impl ActivitySegment {
    pub fn new(frames: Vec<Frame>) -> Result<Self, IngestError> {
        let first = frames.first().ok_or(IngestError::Empty)?.label;
        if let Some(other) = frames.iter().find(|f| f.label != first) {
            return Err(IngestError::MixedSegment {
                first: first.raw(),
                other: other.label.raw(),
            });
        }
        Ok(Self {
            label: first,
            frames,
        })
    }

    pub fn label(&self) -> OperationId {
        self.label
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Which two workers of a pool were combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombineSpec {
    pub worker_ids: (usize, usize),
    pub seed: u64,
}

impl CombineSpec {
    pub fn new(i: usize, j: usize, seed: u64) -> Result<Self, IngestError> {
        if i == j {
            return Err(IngestError::InvalidSpec(format!(
                "worker ids must differ, got ({i}, {j})"
            )));
        }
        Ok(Self {
            worker_ids: (i, j),
            seed,
        })
    }
}

/// Concatenate `b` after `a`, shifting `b` so its first frame lands one median gap of `a`
/// after `a`'s last frame.
pub fn combine_workers(a: &LabeledStream, b: &LabeledStream) -> Result<LabeledStream, IngestError> {
    if a.is_empty() || b.is_empty() {
        return Err(IngestError::Empty);
    }
    let shift = a.last_timestamp() + a.median_gap() - b.first_timestamp();
    let mut frames = Vec::with_capacity(a.len() + b.len());
    frames.extend_from_slice(a.frames());
    frames.extend(b.frames().iter().map(|f| Frame {
        timestamp: f.timestamp + shift,
        ..*f
    }));
    LabeledStream::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: i64, label: u32) -> Frame {
        Frame {
            timestamp: t,
            acc: [t as f64, 0.5, -1.0],
            label: OperationId::new(label).unwrap(),
        }
    }

    fn stream(ts: &[i64], label: u32) -> LabeledStream {
        LabeledStream::new(ts.iter().map(|&t| frame(t, label)).collect()).unwrap()
    }

    #[test]
    fn rejects_empty_and_unordered() {
        assert!(matches!(
            LabeledStream::new(vec![]),
            Err(IngestError::Empty)
        ));
        let err = LabeledStream::new(vec![frame(5, 100), frame(5, 100)]).unwrap_err();
        assert!(matches!(
            err,
            IngestError::NonIncreasingTimestamp { index: 1, .. }
        ));
    }

    #[test]
    fn combine_concatenates() {
        let a = LabeledStream::new((0..100).map(|i| frame(i * 10, 100)).collect()).unwrap();
        let b = LabeledStream::new((0..50).map(|i| frame(i * 7, 300)).collect()).unwrap();
        let c = combine_workers(&a, &b).unwrap();
        assert_eq!(c.len(), 150);
        assert_eq!(&c.frames()[..100], a.frames());
        for (x, y) in c.frames()[100..].iter().zip(b.frames()) {
            assert_eq!(x.acc, y.acc);
            assert_eq!(x.label, y.label);
        }
        let mut lc: Vec<_> = c.labels().collect();
        let mut lab: Vec<_> = a.labels().chain(b.labels()).collect();
        lc.sort();
        lab.sort();
        assert_eq!(lc, lab);
    }

    #[test]
    fn combine_uses_median_gap() {
        // gaps 10, 10, 25 -> median 10
        let a = stream(&[955, 965, 975, 1000], 100);
        assert_eq!(a.median_gap(), 10);
        let b = stream(&[0, 5, 9], 200);
        let c = combine_workers(&a, &b).unwrap();
        assert_eq!(c.frames()[4].timestamp, 1010);
        assert_eq!(c.frames()[5].timestamp, 1015);
    }

    #[test]
    fn median_gap_even_and_single() {
        assert_eq!(stream(&[0], 100).median_gap(), 1);
        assert_eq!(stream(&[0, 2, 6], 100).median_gap(), 3);
    }

    #[test]
    fn segment_requires_uniform_label() {
        assert!(ActivitySegment::new(vec![frame(0, 100), frame(1, 200)]).is_err());
        assert!(ActivitySegment::new(vec![]).is_err());
        assert_eq!(
            ActivitySegment::new(vec![frame(0, 100), frame(1, 100)])
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn combine_spec_requires_distinct_workers() {
        assert!(CombineSpec::new(2, 2, 0).is_err());
        assert!(CombineSpec::new(0, 2, 0).is_ok());
    }
}
