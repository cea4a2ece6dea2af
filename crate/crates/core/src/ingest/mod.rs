//! Loading, synthesizing, combining, normalizing and segmenting labeled
//! accelerometer streams.

mod io;
mod segments;
mod stats;
mod stream;
mod synth;

pub use io::{load_stream, parse_stream, save_stream, write_stream, STREAM_HEADER};
pub use segments::{segment_length_distribution, segment_runs, LengthStats};
pub use stats::{compute_stats, normalize, ChannelStats};
pub use stream::{combine_workers, median_gap_of_segments, ActivitySegment, CombineSpec, Frame, LabeledStream};
pub use synth::{synth_worker, ClassWaveform, SynthWorkerSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("stream is empty")]
    Empty,
    #[error(
        "timestamps must be strictly increasing: frame {index} has {current} after {previous}"
    )]
    NonIncreasingTimestamp {
        index: usize,
        previous: i64,
        current: i64,
    },
    #[error("line {line}: unknown operation id {id}")]
    UnknownLabel { line: u64, id: String },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: timestamp {current} does not increase past {previous}")]
    Ordering {
        line: u64,
        previous: i64,
        current: i64,
    },
    #[error("header must be exactly `{expected}`, found `{found}`")]
    Header {
        expected: &'static str,
        found: String,
    },
    #[error("axis {axis} has zero variance")]
    ZeroVariance { axis: usize },
    #[error("invalid synthetic worker spec: {0}")]
    InvalidSpec(String),
    #[error("segment mixes labels {first} and {other}")]
    MixedSegment { first: u32, other: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
