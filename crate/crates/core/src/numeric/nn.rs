//! Layers shared by the autoencoder and the classifier.

use std::rc::Rc;

use super::{Bound, ParamId, Params, Prng, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Prng,
    ) -> Self {
        let weight = params.add_glorot(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            in_dim,
            out_dim,
            rng,
        );
        let bias = Some(params.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(
        params: &mut Params,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Prng,
    ) -> Self {
        let weight = params.add_glorot(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            in_dim,
            out_dim,
            rng,
        );
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(x);
        if shape.last() != Some(&self.in_dim) {
            return Err(TensorError::mismatch(
                "linear",
                &shape,
                &[self.in_dim, self.out_dim],
            ));
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = tape.reshape(x, &[rows, self.in_dim])?;
        let mut y = tape.matmul(flat, p.var(self.weight))?;
        if let Some(bias) = self.bias {
            y = tape.add_broadcast(y, p.var(bias))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full([dim], 1.0));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros([dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let scaled = tape.mul_broadcast(n, p.var(self.gamma))?;
        tape.add_broadcast(scaled, p.var(self.beta))
    }
}

/// Multi-head scaled dot-product self-attention over `[batch, len, dim]`.
///
/// The key projection has no bias: a key bias shifts every score of a query row by
/// the same amount, which softmax cancels, so its gradient is identically zero.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Post-softmax weights, `[batch * heads, len, len]`, batch-major.
    pub weights: Rc<Tensor>,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut Params,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Prng,
    ) -> Result<Self, TensorError> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(params, &format!("{name}.query"), dim, dim, rng),
            key: Linear::without_bias(params, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(params, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(params, &format!("{name}.output"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim) - dim
    }

    fn split_heads(
        &self,
        tape: &Tape,
        x: Var,
        batch: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let dh = self.dim / self.heads;
        let x = tape.reshape(x, &[batch, len, self.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[batch * self.heads, len, dh])
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<AttentionOutput, TensorError> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(TensorError::mismatch(
                "attention",
                &shape,
                &[0, 0, self.dim],
            ));
        }
        let (batch, len) = (shape[0], shape[1]);
        let dh = self.dim / self.heads;
        let q = self.split_heads(tape, self.query.forward(tape, p, x)?, batch, len)?;
        let k = self.split_heads(tape, self.key.forward(tape, p, x)?, batch, len)?;
        let v = self.split_heads(tape, self.value.forward(tape, p, x)?, batch, len)?;
        let (ctx, probs) = tape.attention(q, k, v, 1.0 / (dh as f64).sqrt())?;
        let ctx = tape.reshape(ctx, &[batch, self.heads, len, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch, len, self.dim])?;
        Ok(AttentionOutput {
            out: self.output.forward(tape, p, ctx)?,
            weights: probs,
        })
    }
}

/// Inverted dropout; identity when `rate` is zero or `rng` is `None` (evaluation).
pub fn dropout(tape: &Tape, x: Var, rate: f64, rng: Option<&mut Prng>) -> Result<Var, TensorError> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x);
    let mask = Tensor::from_fn(shape, |_| {
        if rng.uniform() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul(x, tape.constant(mask))
}
