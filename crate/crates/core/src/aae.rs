//! Class-conditional attention autoencoder with a Gaussian latent space.
//!
//! Encoder: per-frame linear embed of `[x, onehot]`, one self-attention block
//! (residual + layer norm), temporal mean pool, then linear heads for the latent
//! mean and log variance. Decoder: linear map of `[z, onehot]` to a per-frame seed
//! sequence, one self-attention block, per-frame linear to 3 channels.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::ingest::{ActivitySegment, Frame, LengthStats};
use crate::labels::{OperationId, NUM_GENERATED_CLASSES};
use crate::numeric::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::numeric::{AdamState, Bound, Params, Prng, Tape, Tensor, TensorError, Var};
use crate::windowing::WindowedDataset;

const CHECKPOINT_KIND: &str = "aae";

#[derive(Debug, Error)]
pub enum AaeError {
    #[error("invalid autoencoder config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("class index {0} cannot be generated")]
    NotGeneratable(usize),
    #[error("no length distribution for class {0}")]
    MissingLengths(OperationId),
    #[error("invalid class mix: {0}")]
    InvalidMix(String),
    #[error("requested length must be at least 1")]
    ZeroLength,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AaeConfig {
    pub window_len: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub kl_weight: f64,
}

impl Default for AaeConfig {
    fn default() -> Self {
        Self { window_len: 300, embed_dim: 32, heads: 2, latent_dim: 16, kl_weight: 0.001 }
    }
}

impl AaeConfig {
    pub fn validate(&self) -> Result<(), AaeError> {
        let bad = |m: &str| Err(AaeError::InvalidConfig(m.to_string()));
        if self.window_len == 0 {
            return bad("window_len must be positive");
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return bad("kl_weight must be finite and non-negative");
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (l, e, z, c) = (self.window_len, self.embed_dim, self.latent_dim, NUM_GENERATED_CLASSES);
        let encoder = (3 + c) * e + e + MultiHeadAttention::param_count(e) + 2 * e + 2 * (e * z + z);
        let decoder = (z + c) * l * e + l * e + MultiHeadAttention::param_count(e) + 2 * e + 3 * e + 3;
        encoder + decoder
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AaeTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AaeTrainConfig {
    fn default() -> Self {
        Self { lr: 0.001, epochs: 100, batch_size: 32, seed: 0 }
    }
}

impl AaeTrainConfig {
    pub fn validate(&self) -> Result<(), AaeError> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(AaeError::InvalidConfig("lr > 0, epochs >= 1 and batch_size >= 1 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    embed: Linear,
    enc_attn: MultiHeadAttention,
    enc_norm: LayerNorm,
    mu_head: Linear,
    logvar_head: Linear,
    dec_in: Linear,
    dec_attn: MultiHeadAttention,
    dec_norm: LayerNorm,
    dec_out: Linear,
}

/// Graph handles for one encoder pass.
pub struct Encoded {
    pub mu: Var,
    pub logvar: Var,
    /// Encoder attention weights, `[batch * heads, len, len]`.
    pub attention: Rc<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Aae {
    cfg: AaeConfig,
    params: Params,
    layers: Layers,
    /// Timestamp step of generated frames, in milliseconds.
    pub frame_gap: i64,
}

fn class_index(id: OperationId) -> Result<usize, AaeError> {
    if id.is_generatable() {
        Ok(id.index())
    } else {
        Err(AaeError::NotGeneratable(id.index()))
    }
}

impl Aae {
    pub fn build(cfg: AaeConfig, seed: u64) -> Result<Self, AaeError> {
        cfg.validate()?;
        let mut rng = Prng::new(seed);
        let mut p = Params::new();
        let (l, e, z, c) = (cfg.window_len, cfg.embed_dim, cfg.latent_dim, NUM_GENERATED_CLASSES);
        let layers = Layers {
            embed: Linear::new(&mut p, "enc.embed", 3 + c, e, &mut rng),
            enc_attn: MultiHeadAttention::new(&mut p, "enc.attn", e, cfg.heads, &mut rng)?,
            enc_norm: LayerNorm::new(&mut p, "enc.norm", e),
            mu_head: Linear::new(&mut p, "enc.mu", e, z, &mut rng),
            logvar_head: Linear::new(&mut p, "enc.logvar", e, z, &mut rng),
            dec_in: Linear::new(&mut p, "dec.seed", z + c, l * e, &mut rng),
            dec_attn: MultiHeadAttention::new(&mut p, "dec.attn", e, cfg.heads, &mut rng)?,
            dec_norm: LayerNorm::new(&mut p, "dec.norm", e),
            dec_out: Linear::new(&mut p, "dec.out", e, 3, &mut rng),
        };
        Ok(Self { cfg, params: p, layers, frame_gap: 33 })
    }

    pub fn config(&self) -> &AaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    fn onehot(classes: &[usize], repeat: usize) -> Tensor {
        let c = NUM_GENERATED_CLASSES;
        let mut t = Tensor::zeros([classes.len(), repeat, c]);
        let d = t.data_mut();
        for (b, &k) in classes.iter().enumerate() {
            for r in 0..repeat {
                d[(b * repeat + r) * c + k] = 1.0;
            }
        }
        t
    }

    fn check_window(&self, x: &Tensor, n: usize) -> Result<(), AaeError> {
        let want = [n, self.cfg.window_len, 3];
        if x.shape() != want || n == 0 {
            return Err(TensorError::mismatch("aae_input", x.shape(), &want).into());
        }
        Ok(())
    }

    /// Encoder graph for `[batch, window_len, 3]` inputs and class indices in 0..10.
    pub fn encode_graph(&self, tape: &Tape, p: &Bound, x: Var, classes: &[usize]) -> Result<Encoded, AaeError> {
        let l = self.cfg.window_len;
        let cond = tape.constant(Self::onehot(classes, l));
        let h = self.layers.embed.forward(tape, p, tape.concat(&[x, cond], 2)?)?;
        let a = self.layers.enc_attn.forward(tape, p, h)?;
        let h = self.layers.enc_norm.forward(tape, p, tape.add(h, a.out)?)?;
        let pooled = tape.mean_axis(h, 1)?;
        Ok(Encoded {
            mu: self.layers.mu_head.forward(tape, p, pooled)?,
            logvar: self.layers.logvar_head.forward(tape, p, pooled)?,
            attention: a.weights,
        })
    }

    /// Decoder graph from `[batch, latent]` codes to `[batch, window_len, 3]`.
    pub fn decode_graph(&self, tape: &Tape, p: &Bound, z: Var, classes: &[usize]) -> Result<Var, AaeError> {
        let (l, e) = (self.cfg.window_len, self.cfg.embed_dim);
        let cond = tape.constant(Self::onehot(classes, 1).reshape([classes.len(), NUM_GENERATED_CLASSES])?);
        let s = self.layers.dec_in.forward(tape, p, tape.concat(&[z, cond], 1)?)?;
        let s = tape.reshape(s, &[classes.len(), l, e])?;
        let a = self.layers.dec_attn.forward(tape, p, s)?;
        let s = self.layers.dec_norm.forward(tape, p, tape.add(s, a.out)?)?;
        Ok(self.layers.dec_out.forward(tape, p, s)?)
    }

    /// `z = mu + exp(0.5 logvar) * eps` with caller-supplied `eps`.
    pub fn reparameterize(tape: &Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var, TensorError> {
        let std = tape.exp(tape.scale(logvar, 0.5));
        tape.add(mu, tape.mul(std, eps)?)
    }

    /// `MSE(recon, x) + kl_weight * KL`, KL summed over latent dims and averaged over the batch.
    pub fn loss_graph(&self, tape: &Tape, p: &Bound, x: &Tensor, classes: &[usize], eps: &Tensor) -> Result<Var, AaeError> {
        let xv = tape.constant(x.clone());
        let enc = self.encode_graph(tape, p, xv, classes)?;
        let z = Self::reparameterize(tape, enc.mu, enc.logvar, tape.constant(eps.clone()))?;
        let recon = self.decode_graph(tape, p, z, classes)?;
        let mse = tape.mean(tape.square(tape.sub(recon, xv)?));
        if self.cfg.kl_weight == 0.0 {
            return Ok(mse);
        }
        let inner = tape.sub(tape.add_scalar(enc.logvar, 1.0), tape.square(enc.mu))?;
        let inner = tape.sub(inner, tape.exp(enc.logvar))?;
        let kl = tape.scale(tape.sum(inner), -0.5 / classes.len() as f64);
        Ok(tape.add(mse, tape.scale(kl, self.cfg.kl_weight))?)
    }

    fn classes_of(labels: &[OperationId]) -> Result<Vec<usize>, AaeError> {
        labels.iter().map(|&l| class_index(l)).collect()
    }

    /// Latent mean and log variance, each `[batch, latent]`.
    pub fn encode(&self, x: &Tensor, labels: &[OperationId]) -> Result<(Tensor, Tensor), AaeError> {
        self.check_window(x, labels.len())?;
        let classes = Self::classes_of(labels)?;
        let tape = Tape::new();
        let p = tape.bind(&self.params);
        let enc = self.encode_graph(&tape, &p, tape.constant(x.clone()), &classes)?;
        Ok(((*tape.value(enc.mu)).clone(), (*tape.value(enc.logvar)).clone()))
    }

    /// Encoder attention weights for a batch, `[batch * heads, len, len]`.
    pub fn encoder_attention(&self, x: &Tensor, labels: &[OperationId]) -> Result<Tensor, AaeError> {
        self.check_window(x, labels.len())?;
        let classes = Self::classes_of(labels)?;
        let tape = Tape::new();
        let p = tape.bind(&self.params);
        let enc = self.encode_graph(&tape, &p, tape.constant(x.clone()), &classes)?;
        Ok((*enc.attention).clone())
    }

    pub fn sample_latent(mu: &Tensor, logvar: &Tensor, rng: &mut Prng) -> Result<Tensor, TensorError> {
        let eps = Tensor::from_fn(mu.shape().to_vec(), |_| rng.gaussian());
        let std = logvar.map(|v| (0.5 * v).exp());
        mu.add(&std.mul(&eps)?)
    }

    /// Reconstructed windows `[batch, window_len, 3]` from codes `[batch, latent]`.
    pub fn decode(&self, z: &Tensor, labels: &[OperationId]) -> Result<Tensor, AaeError> {
        let want = [labels.len(), self.cfg.latent_dim];
        if z.shape() != want {
            return Err(TensorError::mismatch("aae_decode", z.shape(), &want).into());
        }
        let classes = Self::classes_of(labels)?;
        self.decode_classes(z, &classes)
    }

    fn decode_classes(&self, z: &Tensor, classes: &[usize]) -> Result<Tensor, AaeError> {
        let tape = Tape::new();
        let p = tape.bind(&self.params);
        let out = self.decode_graph(&tape, &p, tape.constant(z.clone()), classes)?;
        Ok((*tape.value(out)).clone())
    }

    /// Mean loss of one batch at fixed noise, without updating parameters.
    pub fn loss(&self, x: &Tensor, labels: &[OperationId], eps: &Tensor) -> Result<f64, AaeError> {
        self.check_window(x, labels.len())?;
        let classes = Self::classes_of(labels)?;
        let tape = Tape::new();
        let p = tape.bind(&self.params);
        Ok(tape.value(self.loss_graph(&tape, &p, x, &classes, eps)?).item()?)
    }

    /// Adam training over `data`; returns the mean loss of every epoch.
    pub fn train(&mut self, data: &WindowedDataset, t: &AaeTrainConfig) -> Result<Vec<f64>, AaeError> {
        t.validate()?;
        if data.is_empty() {
            return Err(AaeError::EmptyTrainingSet);
        }
        if data.window_len != self.cfg.window_len {
            return Err(AaeError::InvalidConfig(format!(
                "windows of length {} for a model of length {}",
                data.window_len, self.cfg.window_len
            )));
        }
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= NUM_GENERATED_CLASSES) {
            return Err(AaeError::NotGeneratable(bad));
        }
        let mut rng = Prng::new(t.seed);
        let mut adam = AdamState::new(&self.params);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut curve = Vec::with_capacity(t.epochs);
        for _ in 0..t.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for idx in order.chunks(t.batch_size) {
                let (x, classes) = data.batch(idx);
                let eps = Tensor::from_fn([idx.len(), self.cfg.latent_dim], |_| rng.gaussian());
                let tape = Tape::new();
                let p = tape.bind(&self.params);
                let loss = self.loss_graph(&tape, &p, &x, &classes, &eps)?;
                total += tape.value(loss).item()? * idx.len() as f64;
                let grads = tape.backward(loss)?;
                adam.step(&mut self.params, &grads, t.lr)?;
            }
            curve.push(total / data.len() as f64);
        }
        Ok(curve)
    }

    /// Decode independent windows under `label` and tile them to `length` frames.
    pub fn generate_segment(&self, label: OperationId, length: usize, rng: &mut Prng) -> Result<ActivitySegment, AaeError> {
        let class = class_index(label)?;
        if length == 0 {
            return Err(AaeError::ZeroLength);
        }
        let l = self.cfg.window_len;
        let n = length.div_ceil(l);
        let z = Tensor::from_fn([n, self.cfg.latent_dim], |_| rng.gaussian());
        let decoded = self.decode_classes(&z, &vec![class; n])?;
        let frames = decoded
            .data()
            .chunks(3)
            .take(length)
            .enumerate()
            .map(|(k, v)| Frame { timestamp: k as i64 * self.frame_gap, acc: [v[0], v[1], v[2]], label })
            .collect();
        ActivitySegment::new(frames).map_err(|e| AaeError::InvalidConfig(e.to_string()))
    }

    /// Segments with labels drawn so that frame shares follow `class_mix`, lengths drawn
    /// from `lengths`, until `total_frames` frames exist (the last segment is cropped).
    pub fn generate_dataset(
        &self,
        lengths: &BTreeMap<OperationId, LengthStats>,
        class_mix: &BTreeMap<OperationId, f64>,
        total_frames: usize,
        rng: &mut Prng,
    ) -> Result<Vec<ActivitySegment>, AaeError> {
        let draw = SegmentDraw::new(lengths, class_mix)?;
        let mut out = Vec::new();
        let mut produced = 0;
        while produced < total_frames {
            let (label, len) = draw.sample(rng);
            let len = len.min(total_frames - produced);
            out.push(self.generate_segment(label, len, rng)?);
            produced += len;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AaeError> {
        Ok(checkpoint::save(path, CHECKPOINT_KIND, &self.cfg, &self.params)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AaeError> {
        let (cfg, tensors) = checkpoint::load::<AaeConfig>(path, CHECKPOINT_KIND)?;
        let mut model = Self::build(cfg, 0)?;
        checkpoint::restore(&mut model.params, tensors)?;
        Ok(model)
    }

    /// Derive the class mix of a segment list by frame share, excluding "Others".
    pub fn class_mix_of(segs: &[ActivitySegment]) -> BTreeMap<OperationId, f64> {
        let mut frames: BTreeMap<OperationId, usize> = BTreeMap::new();
        for s in segs.iter().filter(|s| s.label().is_generatable()) {
            *frames.entry(s.label()).or_default() += s.len();
        }
        let total: usize = frames.values().sum();
        frames.into_iter().map(|(k, v)| (k, v as f64 / total as f64)).collect()
    }
}

/// Label and length sampler. A label is drawn with probability proportional to
/// `mix / mean_length`, which makes expected frame shares match `mix`.
struct SegmentDraw {
    labels: Vec<(OperationId, LengthStats)>,
    cumulative: Vec<f64>,
}

impl SegmentDraw {
    fn new(lengths: &BTreeMap<OperationId, LengthStats>, mix: &BTreeMap<OperationId, f64>) -> Result<Self, AaeError> {
        let total: f64 = mix.values().sum();
        if mix.is_empty() || (total - 1.0).abs() > 1e-6 || mix.values().any(|&w| !(w >= 0.0)) {
            return Err(AaeError::InvalidMix(format!("weights must be non-negative and sum to 1, got {total}")));
        }
        let mut labels = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (&id, &w) in mix {
            class_index(id)?;
            if w == 0.0 {
                continue;
            }
            let stats = *lengths.get(&id).ok_or(AaeError::MissingLengths(id))?;
            acc += w / stats.mean.max(1.0);
            labels.push((id, stats));
            cumulative.push(acc);
        }
        Ok(Self { labels, cumulative })
    }

    fn sample(&self, rng: &mut Prng) -> (OperationId, usize) {
        let u = rng.uniform() * self.cumulative.last().copied().unwrap_or(0.0);
        let i = self.cumulative.iter().position(|&c| u < c).unwrap_or(self.labels.len() - 1);
        let (id, s) = self.labels[i];
        let len = (s.mean + s.std * rng.gaussian()).round().max(s.min.max(1) as f64);
        (id, len as usize)
    }
}

/// Two-column `epoch loss` text, epochs counted from 1.
pub fn loss_curve_text(curve: &[f64]) -> String {
    curve.iter().enumerate().map(|(i, l)| format!("{} {l:?}\n", i + 1)).collect()
}
