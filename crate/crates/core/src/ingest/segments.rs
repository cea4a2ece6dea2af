use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ActivitySegment, IngestError, LabeledStream};
use crate::labels::OperationId;

/// Split a stream into maximal same-label runs.
pub fn segment_runs(s: &LabeledStream) -> Vec<ActivitySegment> {
    let frames = s.frames();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=frames.len() {
        if i == frames.len() || frames[i].label != frames[start].label {
            out.push(
                ActivitySegment::new(frames[start..i].to_vec())
                    .expect("run is uniform and non-empty"),
            );
            start = i;
        }
    }
    out
}

/// Segment-length summary for one class (population std).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub std: f64,
    pub min: usize,
}

pub fn segment_length_distribution(
    segs: &[ActivitySegment],
) -> Result<BTreeMap<OperationId, LengthStats>, IngestError> {
    if segs.is_empty() {
        return Err(IngestError::Empty);
    }
    let mut by_label: BTreeMap<OperationId, Vec<usize>> = BTreeMap::new();
    for seg in segs {
        by_label.entry(seg.label()).or_default().push(seg.len());
    }
    Ok(by_label
        .into_iter()
        .map(|(label, lens)| {
            let n = lens.len() as f64;
            let mean = lens.iter().sum::<usize>() as f64 / n;
            let var = lens.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
            let min = *lens.iter().min().expect("non-empty");
            (
                label,
                LengthStats {
                    mean,
                    std: var.sqrt(),
                    min,
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Frame;
    use rand::{Rng, SeedableRng};

    fn stream_of(labels: &[u32]) -> LabeledStream {
        LabeledStream::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| Frame {
                    timestamp: 10 * i as i64,
                    acc: [i as f64, -(i as f64), 0.25],
                    label: OperationId::new(l).unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn run_length_encoding() {
        let segs = segment_runs(&stream_of(&[100, 100, 300, 300, 300, 100]));
        assert_eq!(
            segs.iter().map(|s| s.len()).collect::<Vec<_>>(),
            vec![2, 3, 1]
        );
        assert_eq!(
            segs.iter().map(|s| s.label().raw()).collect::<Vec<_>>(),
            vec![100, 300, 100]
        );
        assert_eq!(segment_runs(&stream_of(&[500; 7])).len(), 1);
    }

    #[test]
    fn flatten_of_runs_reproduces_stream() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ids = [100, 200, 300, 8100];
        let mut labels = Vec::new();
        let mut cur = 100;
        for _ in 0..1000 {
            if rng.random_bool(0.1) {
                cur = ids[rng.random_range(0..ids.len())];
            }
            labels.push(cur);
        }
        let s = stream_of(&labels);
        let segs = segment_runs(&s);
        let flat: Vec<Frame> = segs
            .iter()
            .flat_map(|g| g.frames().iter().copied())
            .collect();
        assert_eq!(flat, s.frames());
        assert!(segs.windows(2).all(|w| w[0].label() != w[1].label()));
    }

    #[test]
    fn length_statistics() {
        let d = segment_length_distribution(&segment_runs(&stream_of(&[
            100, 100, 200, 100, 100, 200, 100, 100,
        ])))
        .unwrap();
        let l100 = d[&OperationId::new(100).unwrap()];
        assert_eq!((l100.mean, l100.std, l100.min), (2.0, 0.0, 2));
        assert_eq!(d.len(), 2);

        let d = segment_length_distribution(&segment_runs(&stream_of(&[300, 100, 100, 100, 300])))
            .unwrap();
        let l300 = d[&OperationId::new(300).unwrap()];
        assert_eq!((l300.mean, l300.std, l300.min), (1.0, 0.0, 1));

        let d = segment_length_distribution(&segment_runs(&stream_of(&[700, 900, 700, 700, 700])))
            .unwrap();
        let l700 = d[&OperationId::new(700).unwrap()];
        assert_eq!((l700.mean, l700.std, l700.min), (2.0, 1.0, 1));
        assert!(!d.contains_key(&OperationId::new(100).unwrap()));
    }

    #[test]
    fn empty_segment_list_is_error() {
        assert!(segment_length_distribution(&[]).is_err());
    }
}
