//! Segment-level reordering strategies: random (RS), ascending (AS) and
//! shuffle-group-sort (RDSS).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::ingest::ActivitySegment;
use crate::ingest::{Frame, IngestError, LabeledStream};
use crate::numeric::Prng;

#[derive(Debug, Error)]
pub enum ReorderError {
    #[error("no segments to reorder")]
    Empty,
    #[error("group_count must be at least 1")]
    ZeroGroups,
    #[error("unknown strategy `{0}` (expected rs, as or rdss)")]
    UnknownStrategy(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RdssConfig {
    pub group_count: usize,
    pub seed: u64,
}

impl RdssConfig {
    pub fn new(group_count: usize, seed: u64) -> Result<Self, ReorderError> {
        if group_count == 0 {
            return Err(ReorderError::ZeroGroups);
        }
        Ok(Self { group_count, seed })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "rs")]
    Random,
    #[serde(rename = "as")]
    Ascending,
    #[serde(rename = "rdss")]
    GroupedAscending,
}

impl FromStr for Strategy {
    type Err = ReorderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rs" => Ok(Strategy::Random),
            "as" => Ok(Strategy::Ascending),
            "rdss" => Ok(Strategy::GroupedAscending),
            _ => Err(ReorderError::UnknownStrategy(s.to_string())),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "RS",
            Strategy::Ascending => "AS",
            Strategy::GroupedAscending => "RDSS",
        })
    }
}

impl Strategy {
    pub fn apply(self, segs: &[ActivitySegment], seed: u64, group_count: usize) -> Result<LabeledStream, ReorderError> {
        match self {
            Strategy::Random => reorder_rs(segs, seed),
            Strategy::Ascending => reorder_as(segs),
            Strategy::GroupedAscending => reorder_rdss(segs, &RdssConfig::new(group_count, seed)?),
        }
    }
}

/// Concatenate segments, rewriting timestamps as `start + k * gap` where `start` is the
/// earliest source timestamp and `gap` the median within-segment gap.
pub fn flatten(segs: &[ActivitySegment]) -> Result<LabeledStream, ReorderError> {
    if segs.is_empty() {
        return Err(ReorderError::Empty);
    }
    let start = segs.iter().map(|s| s.frames()[0].timestamp).min().expect("non-empty");
    let gap = crate::ingest::median_gap_of_segments(segs);
    let frames: Vec<Frame> = segs
        .iter()
        .flat_map(|s| s.frames().iter())
        .enumerate()
        .map(|(k, f)| Frame { timestamp: start + k as i64 * gap, ..*f })
        .collect();
    Ok(LabeledStream::new(frames)?)
}

/// Uniformly random segment order.
pub fn reorder_rs(segs: &[ActivitySegment], seed: u64) -> Result<LabeledStream, ReorderError> {
    flatten(&shuffled(segs, seed)?)
}

/// Segments stably sorted by ascending label.
pub fn reorder_as(segs: &[ActivitySegment]) -> Result<LabeledStream, ReorderError> {
    if segs.is_empty() {
        return Err(ReorderError::Empty);
    }
    let mut out = segs.to_vec();
    out.sort_by_key(|s| s.label());
    flatten(&out)
}

/// Shuffle, split into `min(group_count, n)` contiguous groups, sort each group.
pub fn reorder_rdss(segs: &[ActivitySegment], cfg: &RdssConfig) -> Result<LabeledStream, ReorderError> {
    let groups = rdss_groups(segs, cfg)?;
    flatten(&groups.concat())
}

/// The groups `reorder_rdss` concatenates, in order. Sizes differ by at most one,
/// with the larger groups first.
pub fn rdss_groups(segs: &[ActivitySegment], cfg: &RdssConfig) -> Result<Vec<Vec<ActivitySegment>>, ReorderError> {
    if cfg.group_count == 0 {
        return Err(ReorderError::ZeroGroups);
    }
    let mut items = shuffled(segs, cfg.seed)?.into_iter();
    let n = segs.len();
    let g = cfg.group_count.min(n);
    let (base, extra) = (n / g, n % g);
    Ok((0..g)
        .map(|i| {
            let mut group: Vec<ActivitySegment> = items.by_ref().take(base + usize::from(i < extra)).collect();
            group.sort_by_key(|s| s.label());
            group
        })
        .collect())
}

fn shuffled(segs: &[ActivitySegment], seed: u64) -> Result<Vec<ActivitySegment>, ReorderError> {
    if segs.is_empty() {
        return Err(ReorderError::Empty);
    }
    let mut out = segs.to_vec();
    Prng::new(seed).shuffle(&mut out);
    Ok(out)
}
