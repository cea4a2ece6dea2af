use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Frame, IngestError, LabeledStream};
use crate::labels::{LabelSet, OperationId};
use crate::numeric::Prng;

/// Waveform and segment-length parameters of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassWaveform {
    pub id: OperationId,
    pub freq_hz: f64,
    pub amplitude: f64,
    /// Constant per-axis component (sensor orientation during the activity).
    #[serde(default)]
    pub offset: [f64; 3],
    pub noise_std: f64,
    pub len_mean: f64,
    pub len_std: f64,
    pub len_min: usize,
}

/// Parameters of a synthetic worker recording.
///
/// The worker cycles through its classes in ascending id order, one segment per class
/// per cycle, until `duration` frames have been produced (the last segment is cropped).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthWorkerSpec {
    pub classes: Vec<ClassWaveform>,
    pub duration: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl SynthWorkerSpec {
    /// A desk-scale worker over all 11 classes. `variant` perturbs frequencies and
    /// amplitudes slightly so that different workers are distinguishable.
    pub fn desk(seed: u64, duration: usize, variant: u32) -> Self {
        let jitter = 1.0 + 0.04 * variant as f64;
        let classes = LabelSet::IDS
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let theta = 2.0 * PI * i as f64 / LabelSet::IDS.len() as f64;
                let offset = [0.8 * theta.cos(), 0.8 * theta.sin(), 0.4 * (2.0 * theta).cos()];
                if id.is_generatable() {
                    ClassWaveform {
                        id,
                        freq_hz: (0.3 + 0.35 * i as f64) * jitter,
                        amplitude: (0.6 + 0.15 * (i % 4) as f64) / jitter,
                        offset,
                        noise_std: 0.3,
                        len_mean: 180.0 + 20.0 * (i % 3) as f64,
                        len_std: 50.0,
                        len_min: 40,
                    }
                } else {
                    ClassWaveform {
                        id,
                        freq_hz: 5.0 * jitter,
                        amplitude: 0.3,
                        offset,
                        noise_std: 0.6,
                        len_mean: 60.0,
                        len_std: 20.0,
                        len_min: 20,
                    }
                }
            })
            .collect();
        Self {
            classes,
            duration,
            sample_rate_hz: 30.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::InvalidSpec(m));
        if self.duration == 0 {
            return bad("duration must be at least 1 frame".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz <= 1000.0) {
            return bad(format!(
                "sample_rate_hz must be in (0, 1000], got {}",
                self.sample_rate_hz
            ));
        }
        let mut ids: Vec<_> = self.classes.iter().map(|c| c.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.classes.len() {
            return bad("class ids must be unique".into());
        }
        for c in &self.classes {
            if !(c.noise_std >= 0.0 && c.len_std >= 0.0) {
                return bad(format!("class {}: standard deviations must be >= 0", c.id));
            }
            if c.len_min < 1 {
                return bad(format!("class {}: len_min must be >= 1", c.id));
            }
            if !(c.freq_hz.is_finite() && c.amplitude.is_finite() && c.len_mean.is_finite() && c.offset.iter().all(|o| o.is_finite())) {
                return bad(format!("class {}: parameters must be finite", c.id));
            }
        }
        Ok(())
    }
}

/// Generate a labeled stream; a pure function of `spec`.
pub fn synth_worker(spec: &SynthWorkerSpec) -> Result<LabeledStream, IngestError> {
    spec.validate()?;
    let mut classes: Vec<&ClassWaveform> = spec.classes.iter().collect();
    classes.sort_by_key(|c| c.id);
    let mut rng = Prng::new(spec.seed);
    let mut frames = Vec::with_capacity(spec.duration);
    let phases = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];

    'outer: loop {
        for c in &classes {
            let drawn = (c.len_mean + c.len_std * rng.gaussian()).round();
            let len = if drawn.is_finite() && drawn > c.len_min as f64 {
                drawn as usize
            } else {
                c.len_min
            };
            let len = len.min(spec.duration - frames.len());
            for _ in 0..len {
                let t = frames.len();
                let arg = 2.0 * PI * c.freq_hz * t as f64 / spec.sample_rate_hz;
                let mut acc = [0.0; 3];
                for (k, a) in acc.iter_mut().enumerate() {
                    let noise = if c.noise_std > 0.0 {
                        c.noise_std * rng.gaussian()
                    } else {
                        0.0
                    };
                    *a = c.offset[k] + c.amplitude * (arg + phases[k]).sin() + noise;
                }
                frames.push(Frame {
                    timestamp: timestamp_ms(t, spec.sample_rate_hz),
                    acc,
                    label: c.id,
                });
            }
            if frames.len() == spec.duration {
                break 'outer;
            }
        }
    }
    LabeledStream::new(frames)
}

fn timestamp_ms(frame: usize, rate: f64) -> i64 {
    (frame as f64 * 1000.0 / rate).round() as i64
}
