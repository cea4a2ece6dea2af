//! Transformer encoder classifier over accelerometer windows.

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::labels::NUM_CLASSES;
use crate::numeric::nn::{dropout, LayerNorm, Linear, MultiHeadAttention};
use crate::numeric::{cosine_lr, AdamState, Bound, CosineSchedule, ParamId, Params, Prng, Tape, Tensor, TensorError, Var};
use crate::windowing::WindowedDataset;

const CHECKPOINT_KIND: &str = "classifier";
const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("label {label} out of range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub classes: usize,
    pub window_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { d_model: 64, heads: 4, layers: 2, ffn_dim: 128, dropout: 0.1, classes: NUM_CLASSES, window_len: 300 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.to_string()));
        if self.heads == 0 || self.d_model % self.heads != 0 || self.d_model == 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even");
        }
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.ffn_dim == 0 || self.classes < 2 || self.window_len == 0 {
            return bad("ffn_dim, window_len must be positive and classes at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr_max: 1e-3, lr_min: 1e-5, max_epochs: 100, batch_size: 64, patience: 10, min_delta: 1e-4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(ClassifierError::InvalidConfig("patience, max_epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr_min <= self.lr_max) || !(self.lr_min >= 0.0) {
            return Err(ClassifierError::InvalidConfig("need 0 <= lr_min <= lr_max".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(ClassifierError::InvalidConfig("min_delta must be non-negative".into()));
        }
        Ok(())
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(length: usize, d_model: usize) -> Result<Tensor, TensorError> {
    if d_model % 2 != 0 || d_model == 0 {
        return Err(TensorError::InvalidArgument(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    Ok(Tensor::from_fn([length, d_model], |k| {
        let (pos, j) = (k / d_model, k % d_model);
        let angle = pos as f64 / 10000f64.powf((j - j % 2) as f64 / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Period {
    Initial,
    EarlyMid,
    LateMid,
    End,
}

impl Period {
    pub const ALL: [Period; 4] = [Period::Initial, Period::EarlyMid, Period::LateMid, Period::End];

    pub fn tag(self) -> &'static str {
        match self {
            Period::Initial => "initial",
            Period::EarlyMid => "early-mid",
            Period::LateMid => "late-mid",
            Period::End => "end",
        }
    }

    /// Snapshot epoch for a run of `epochs` epochs: 0, ceil(E/3), ceil(2E/3), E.
    pub fn epoch(self, epochs: usize) -> usize {
        match self {
            Period::Initial => 0,
            Period::EarlyMid => epochs.div_ceil(3),
            Period::LateMid => (2 * epochs).div_ceil(3),
            Period::End => epochs,
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Period {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Period::ALL.into_iter().find(|p| p.tag() == s).ok_or_else(|| format!("unknown period `{s}`"))
    }
}

/// Batch-averaged attention weights of one head, `(L+1) x (L+1)` with the CLS token at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub period: Period,
    pub epoch: usize,
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: TransformerConfig,
    params: Params,
    embed: Linear,
    cls: ParamId,
    blocks: Vec<Block>,
    head: Linear,
    pe: Tensor,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Per layer, `[batch * heads, L+1, L+1]`.
    pub attention: Vec<Rc<Tensor>>,
}

impl Transformer {
    pub fn build(cfg: TransformerConfig, seed: u64) -> Result<Self, ClassifierError> {
        cfg.validate()?;
        let mut rng = Prng::new(seed);
        let mut p = Params::new();
        let d = cfg.d_model;
        let embed = Linear::new(&mut p, "embed", 3, d, &mut rng);
        let cls = p.add_glorot("cls", &[1, d], 1, d, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = format!("block{i}");
            blocks.push(Block {
                norm1: LayerNorm::new(&mut p, &format!("{name}.norm1"), d),
                attn: MultiHeadAttention::new(&mut p, &format!("{name}.attn"), d, cfg.heads, &mut rng)?,
                norm2: LayerNorm::new(&mut p, &format!("{name}.norm2"), d),
                ff1: Linear::new(&mut p, &format!("{name}.ff1"), d, cfg.ffn_dim, &mut rng),
                ff2: Linear::new(&mut p, &format!("{name}.ff2"), cfg.ffn_dim, d, &mut rng),
            });
        }
        let head = Linear::new(&mut p, "head", d, cfg.classes, &mut rng);
        let pe = positional_encoding(cfg.window_len + 1, d)?;
        Ok(Self { cfg, params: p, embed, cls, blocks, head, pe })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn set_params(&mut self, params: Params) -> Result<(), ClassifierError> {
        let same = params.len() == self.params.len()
            && params.iter().zip(self.params.iter()).all(|(a, b)| a.1 == b.1 && a.2.shape() == b.2.shape());
        if !same {
            return Err(ClassifierError::InvalidConfig("parameter layout does not match the model".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Training mode when `rng` is given (dropout active), evaluation mode otherwise.
    pub fn forward_graph(&self, tape: &Tape, p: &Bound, x: Var, mut rng: Option<&mut Prng>) -> Result<ForwardOutput, ClassifierError> {
        let shape = tape.shape(x);
        let want = [shape.first().copied().unwrap_or(0), self.cfg.window_len, 3];
        if shape != want || want[0] == 0 {
            return Err(TensorError::mismatch("classifier_input", &shape, &want).into());
        }
        let (b, d, rate) = (want[0], self.cfg.d_model, self.cfg.dropout);
        let h = self.embed.forward(tape, p, x)?;
        let cls = tape.repeat_leading(p.var(self.cls), b);
        let mut seq = tape.add_broadcast(tape.concat(&[cls, h], 1)?, tape.constant(self.pe.clone()))?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let a = blk.attn.forward(tape, p, blk.norm1.forward(tape, p, seq)?)?;
            attention.push(a.weights);
            seq = tape.add(seq, dropout(tape, a.out, rate, rng.as_deref_mut())?)?;
            let f = tape.relu(blk.ff1.forward(tape, p, blk.norm2.forward(tape, p, seq)?)?);
            let f = blk.ff2.forward(tape, p, dropout(tape, f, rate, rng.as_deref_mut())?)?;
            seq = tape.add(seq, dropout(tape, f, rate, rng.as_deref_mut())?)?;
        }
        let cls_out = tape.reshape(tape.slice(seq, 1, 0, 1)?, &[b, d])?;
        Ok(ForwardOutput { logits: self.head.forward(tape, p, cls_out)?, attention })
    }

    /// Mean cross-entropy of a batch.
    pub fn loss_graph(&self, tape: &Tape, p: &Bound, x: &Tensor, labels: &[usize], rng: Option<&mut Prng>) -> Result<Var, ClassifierError> {
        if let Some(&label) = labels.iter().find(|&&l| l >= self.cfg.classes) {
            return Err(ClassifierError::LabelOutOfRange { label, classes: self.cfg.classes });
        }
        let out = self.forward_graph(tape, p, tape.constant(x.clone()), rng)?;
        Ok(tape.softmax_cross_entropy(out.logits, labels)?)
    }

    /// Evaluation-mode logits `[batch, classes]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ClassifierError> {
        let tape = Tape::new();
        let p = tape.bind(&self.params);
        let out = self.forward_graph(&tape, &p, tape.constant(x.clone()), None)?;
        Ok((*tape.value(out.logits)).clone())
    }

    /// Argmax class per window, ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, ClassifierError> {
        Ok(self.logits(x)?.argmax_last()?)
    }

    pub fn predict_dataset(&self, data: &WindowedDataset) -> Result<Vec<usize>, ClassifierError> {
        let mut out = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            out.extend(self.predict(&data.batch(chunk).0)?);
        }
        Ok(out)
    }

    /// Evaluation-mode mean cross-entropy over a whole dataset.
    pub fn dataset_loss(&self, data: &WindowedDataset) -> Result<f64, ClassifierError> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(EVAL_BATCH) {
            let (x, y) = data.batch(chunk);
            let tape = Tape::new();
            let p = tape.bind(&self.params);
            total += tape.value(self.loss_graph(&tape, &p, &x, &y, None)?).item()? * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// Evaluation-mode attention of every layer and head, averaged over the probe batch.
    pub fn attention_trace(&self, probe: &Tensor, period: Period, epoch: usize) -> Result<Vec<AttentionTrace>, ClassifierError> {
        let tape = Tape::new();
        let p = tape.bind(&self.params);
        let out = self.forward_graph(&tape, &p, tape.constant(probe.clone()), None)?;
        let (b, h, n) = (probe.shape()[0], self.cfg.heads, self.cfg.window_len + 1);
        let mut traces = Vec::with_capacity(out.attention.len() * h);
        for (layer, w) in out.attention.iter().enumerate() {
            for head in 0..h {
                let mut avg = vec![0.0; n * n];
                for s in 0..b {
                    let m = &w.data()[(s * h + head) * n * n..(s * h + head + 1) * n * n];
                    for (a, v) in avg.iter_mut().zip(m) {
                        *a += v;
                    }
                }
                avg.iter_mut().for_each(|a| *a /= b as f64);
                traces.push(AttentionTrace { period, epoch, layer, head, weights: Tensor::new([n, n], avg)? });
            }
        }
        Ok(traces)
    }

    /// Mini-batch training with a cosine learning-rate schedule and early stopping on
    /// validation loss. The best-validation parameters are restored before returning.
    pub fn train(&mut self, train: &WindowedDataset, val: &WindowedDataset, t: &TrainConfig, probe: Option<&Tensor>) -> Result<TrainOutcome, ClassifierError> {
        t.validate()?;
        if train.is_empty() {
            return Err(ClassifierError::EmptySplit("train"));
        }
        if val.is_empty() {
            return Err(ClassifierError::EmptySplit("val"));
        }
        for &label in train.labels.iter().chain(&val.labels) {
            if label >= self.cfg.classes {
                return Err(ClassifierError::LabelOutOfRange { label, classes: self.cfg.classes });
            }
        }
        let sched = CosineSchedule::new(t.lr_max, t.lr_min, t.max_epochs)?;
        let mut rng = Prng::new(t.seed);
        let mut adam = AdamState::new(&self.params);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::new();
        let mut snapshots = vec![self.params.clone()];
        let mut stop = EarlyStopping::new(t.patience, t.min_delta);
        let mut best_params = self.params.clone();
        for epoch in 0..t.max_epochs {
            let lr = cosine_lr(epoch, &sched)?;
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for idx in order.chunks(t.batch_size) {
                let (x, y) = train.batch(idx);
                let tape = Tape::new();
                let p = tape.bind(&self.params);
                let loss = self.loss_graph(&tape, &p, &x, &y, Some(&mut rng))?;
                total += tape.value(loss).item()? * idx.len() as f64;
                let grads = tape.backward(loss)?;
                adam.step(&mut self.params, &grads, lr)?;
            }
            let val_loss = self.dataset_loss(val)?;
            history.push(EpochRecord { epoch: epoch + 1, train_loss: total / train.len() as f64, val_loss, lr });
            if probe.is_some() {
                snapshots.push(self.params.clone());
            }
            let decision = stop.update(epoch + 1, val_loss);
            if decision.improved {
                best_params = self.params.clone();
            }
            if decision.stop {
                break;
            }
        }
        let epochs = history.len();
        let mut traces = Vec::new();
        if let Some(probe) = probe {
            for period in Period::ALL {
                let e = period.epoch(epochs);
                self.params = snapshots[e].clone();
                traces.extend(self.attention_trace(probe, period, e)?);
            }
        }
        self.params = best_params;
        Ok(TrainOutcome {
            history,
            best_epoch: stop.best_epoch,
            best_val_loss: stop.best,
            stopped_early: epochs < t.max_epochs,
            traces,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifierError> {
        Ok(checkpoint::save(path, CHECKPOINT_KIND, &self.cfg, &self.params)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassifierError> {
        let (cfg, tensors) = checkpoint::load::<TransformerConfig>(path, CHECKPOINT_KIND)?;
        let mut model = Self::build(cfg, 0)?;
        checkpoint::restore(&mut model.params, tensors)?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub traces: Vec<AttentionTrace>,
}

/// Four-column `epoch,train_loss,val_loss,lr` text with a header.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops once the monitored loss has failed to improve by `min_delta` for `patience`
/// consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, best_epoch: 0, wait: 0 }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss < self.best - self.min_delta || (self.best.is_infinite() && loss.is_finite());
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        StopDecision { improved, stop: self.wait >= self.patience }
    }
}
