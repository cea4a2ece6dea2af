//! Reverse-mode gradient recording.
//!
//! Every op evaluates eagerly and appends a node holding its output and the data its
//! gradient rule needs. Nodes only reference earlier nodes, so reverse construction
//! order is a valid reverse topological order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::gemm;
use super::{ParamId, Params, Tensor, TensorError};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddSuffix(usize, usize),
    MulSuffix(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Bmm {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
        alpha: f64,
    },
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Softmax(usize),
    LayerNorm {
        a: usize,
        rstd: Vec<f64>,
    },
    Relu(usize),
    Exp(usize),
    Square(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanAxis {
        a: usize,
        axis: usize,
    },
    RepeatLeading(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        alpha: f64,
        probs: Rc<Tensor>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddSuffix(..) => "add_broadcast",
            Op::MulSuffix(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Bmm { .. } => "bmm",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::RepeatLeading(..) => "repeat_leading",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Attention { .. } => "attention",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddSuffix(a, b) | Op::MulSuffix(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::RepeatLeading(a) => vec![*a],
            Op::Slice { a, .. } | Op::LayerNorm { a, .. } | Op::MeanAxis { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    param: Option<ParamId>,
    /// Whether any parameter is upstream of this node.
    needs_grad: bool,
}

/// Parameter-variable bindings produced by [`Tape::bind`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }
}

/// Gradients of a scalar loss with respect to every parameter registered on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients(BTreeMap<ParamId, Tensor>);

impl Gradients {
    pub fn wrt(&self, id: ParamId) -> Result<&Tensor, TensorError> {
        self.0.get(&id).ok_or(TensorError::NotOnTape(id.index()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    corrupted: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose gradient rule for op `name` is deliberately wrong (halved).
    /// Only useful for testing gradient checkers.
    #[doc(hidden)]
    pub fn with_corrupted_rule(name: &'static str) -> Self {
        Self {
            nodes: RefCell::default(),
            corrupted: Some(name),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            param: None,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Non-differentiated input.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&self, id: ParamId, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Leaf);
        let mut nodes = self.nodes.borrow_mut();
        nodes[v.0].param = Some(id);
        nodes[v.0].needs_grad = true;
        v
    }

    /// Register every parameter of `params` as a leaf.
    pub fn bind(&self, params: &Params) -> Bound {
        Bound(params.iter().map(|(id, _, t)| self.param(id, t)).collect())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.val(a).add(&self.val(b))?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.val(a).sub(&self.val(b))?;
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.val(a).mul(&self.val(b))?;
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    /// `a + b` with `b` broadcast over `a`'s leading axes.
    pub fn add_broadcast(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.val(a).add_suffix(&self.val(b))?;
        Ok(self.push(out, Op::AddSuffix(a.0, b.0)))
    }

    pub fn mul_broadcast(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.val(a).mul_suffix(&self.val(b))?;
        Ok(self.push(out, Op::MulSuffix(a.0, b.0)))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.val(a).scale(s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.val(a).add_scalar(s);
        self.push(out, Op::AddScalar(a.0))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.val(a).matmul(&self.val(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn bmm(
        &self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        alpha: f64,
    ) -> Result<Var, TensorError> {
        let out = self.val(a).bmm(&self.val(b), trans_a, trans_b, alpha)?;
        Ok(self.push(
            out,
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_a,
                trans_b,
                alpha,
            },
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        self.permute(a, &[1, 0])
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let out = self.val(a).permute(perm)?;
        Ok(self.push(out, Op::Permute(a.0, perm.to_vec())))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.val(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.0)))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.val(p)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        ))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let out = self.val(a).slice(axis, start, len)?;
        Ok(self.push(
            out,
            Op::Slice {
                a: a.0,
                axis,
                start,
            },
        ))
    }

    pub fn softmax(&self, a: Var) -> Result<Var, TensorError> {
        let out = self.val(a).softmax_last()?;
        Ok(self.push(out, Op::Softmax(a.0)))
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let (out, rstd) = self.val(a).layer_norm_last(eps)?;
        Ok(self.push(out, Op::LayerNorm { a: a.0, rstd }))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.val(a).relu();
        self.push(out, Op::Relu(a.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.val(a).exp();
        self.push(out, Op::Exp(a.0))
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.val(a).map(|v| v * v);
        self.push(out, Op::Square(a.0))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).sum_all());
        self.push(out, Op::SumAll(a.0))
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).mean_all());
        self.push(out, Op::MeanAll(a.0))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.val(a).mean_axis(axis)?;
        Ok(self.push(out, Op::MeanAxis { a: a.0, axis }))
    }

    /// Tile `a` along a new leading axis of length `n`.
    pub fn repeat_leading(&self, a: Var, n: usize) -> Var {
        let out = self.val(a).repeat_leading(n);
        self.push(out, Op::RepeatLeading(a.0))
    }

    /// Mean cross-entropy of rows of `logits` (batch × classes) against class indices.
    pub fn softmax_cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        let x = self.val(logits);
        if x.rank() != 2 || x.shape()[0] != targets.len() || x.shape()[0] == 0 {
            return Err(TensorError::mismatch(
                "softmax_cross_entropy",
                x.shape(),
                &[targets.len()],
            ));
        }
        let k = x.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::InvalidArgument(format!(
                "target class {bad} out of range 0..{k}"
            )));
        }
        let probs = x.softmax_last()?;
        let mut loss = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = &x.data()[b * k..(b + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Fused `softmax(alpha * q k^T) v` over `[batch, len, dim]` operands.
    /// Returns the context and the attention weights `[batch, len_q, len_k]`; the
    /// weights are a by-product and carry no gradient.
    pub fn attention(&self, q: Var, k: Var, v: Var, alpha: f64) -> Result<(Var, Rc<Tensor>), TensorError> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let (qs, ks, vs) = (qv.shape(), kv.shape(), vv.shape());
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
            return Err(TensorError::mismatch("attention", qs, ks));
        }
        if !(alpha > 0.0) {
            return Err(TensorError::InvalidArgument(format!("attention scale must be positive, got {alpha}")));
        }
        let (batch, lq, lk, d, dv) = (qs[0], qs[1], ks[1], qs[2], vs[2]);
        let mut probs = vec![0.0; batch * lq * lk];
        let mut ctx = vec![0.0; batch * lq * dv];
        for t in 0..batch {
            let p = &mut probs[t * lq * lk..(t + 1) * lq * lk];
            gemm(&qv.data()[t * lq * d..(t + 1) * lq * d], &kv.data()[t * lk * d..(t + 1) * lk * d], p, (lq, d, lk), false, true);
            for row in p.chunks_mut(lk) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * alpha;
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x * alpha - max).exp();
                    sum += *x;
                }
                let inv = 1.0 / sum;
                row.iter_mut().for_each(|x| *x *= inv);
            }
            gemm(p, &vv.data()[t * lk * dv..(t + 1) * lk * dv], &mut ctx[t * lq * dv..(t + 1) * lq * dv], (lq, lk, dv), false, false);
        }
        let probs = Rc::new(Tensor::new([batch, lq, lk], probs)?);
        let out = Tensor::new([batch, lq, dv], ctx)?;
        let var = self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, alpha, probs: Rc::clone(&probs) });
        Ok((var, probs))
    }

    /// Reverse accumulation from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(TensorError::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));
        let mut out = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(pid) = node.param {
                accumulate_into(&mut out, pid, g);
                continue;
            }
            let need = |p: usize| nodes[p].needs_grad;
            let mut contribs = local_gradients(&nodes, node, &g, &need)?;
            contribs.retain(|(p, _)| need(*p));
            if self.corrupted == Some(node.op.name()) {
                contribs.iter_mut().for_each(|(_, t)| *t = t.scale(0.5));
            }
            for (parent, t) in contribs {
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
        }
        for node in nodes.iter() {
            if let Some(pid) = node.param {
                out.entry(pid)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients(out))
    }
}

fn accumulate_into(map: &mut BTreeMap<ParamId, Tensor>, pid: ParamId, g: Tensor) {
    match map.get_mut(&pid) {
        Some(acc) => acc.add_assign(&g).expect("same parameter, same shape"),
        None => {
            map.insert(pid, g);
        }
    }
}

fn local_gradients(
    nodes: &[Node],
    node: &Node,
    g: &Tensor,
    need: &dyn Fn(usize) -> bool,
) -> Result<Vec<(usize, Tensor)>, TensorError> {
    let v = |i: usize| nodes[i].value.as_ref();
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
        Op::Mul(a, b) => vec![(*a, g.mul(v(*b))?), (*b, g.mul(v(*a))?)],
        Op::AddSuffix(a, b) => vec![(*a, g.clone()), (*b, g.sum_to_suffix(v(*b).shape())?)],
        Op::MulSuffix(a, b) => vec![
            (*a, g.mul_suffix(v(*b))?),
            (*b, g.mul(v(*a))?.sum_to_suffix(v(*b).shape())?),
        ],
        Op::Scale(a, s) => vec![(*a, g.scale(*s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => {
            let (av, bv) = (v(*a), v(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut out = Vec::with_capacity(2);
            if need(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(g.data(), bv.data(), &mut ga, (m, n, k), false, true);
                out.push((*a, Tensor::new([m, k], ga)?));
            }
            if need(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(av.data(), g.data(), &mut gb, (k, m, n), true, false);
                out.push((*b, Tensor::new([k, n], gb)?));
            }
            out
        }
        Op::Bmm {
            a,
            b,
            trans_a,
            trans_b,
            alpha,
        } => {
            let (av, bv, s) = (v(*a), v(*b), *alpha);
            let (ga, gb) = match (trans_a, trans_b) {
                (false, false) => (g.bmm(bv, false, true, s)?, av.bmm(g, true, false, s)?),
                (false, true) => (g.bmm(bv, false, false, s)?, g.bmm(av, true, false, s)?),
                (true, false) => (bv.bmm(g, false, true, s)?, av.bmm(g, false, false, s)?),
                (true, true) => (bv.bmm(g, true, true, s)?, g.bmm(av, true, true, s)?),
            };
            vec![(*a, ga), (*b, gb)]
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*a, g.permute(&inv)?)]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(v(*a).shape())?)],
        Op::Concat { parts, axis } => {
            let mut start = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let len = v(p).shape()[*axis];
                out.push((p, g.slice(*axis, start, len)?));
                start += len;
            }
            out
        }
        Op::Slice { a, axis, start } => {
            let src = v(*a).shape();
            let (outer, full, inner): (usize, usize, usize) = (
                src[..*axis].iter().product(),
                src[*axis],
                src[*axis + 1..].iter().product(),
            );
            let len = g.shape()[*axis];
            let mut data = vec![0.0; v(*a).numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let srcoff = o * len * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[srcoff..srcoff + len * inner]);
            }
            vec![(*a, Tensor::new(src.to_vec(), data)?)]
        }
        Op::Softmax(a) => {
            let y = node.value.as_ref();
            let d = *y.shape().last().expect("softmax input has a last axis");
            let mut data = vec![0.0; y.numel()];
            for ((dst, yr), gr) in data
                .chunks_mut(d)
                .zip(y.data().chunks(d))
                .zip(g.data().chunks(d))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((o, &yy), &gg) in dst.iter_mut().zip(yr).zip(gr) {
                    *o = yy * (gg - dot);
                }
            }
            vec![(*a, Tensor::new(y.shape().to_vec(), data)?)]
        }
        Op::LayerNorm { a, rstd } => {
            let y = node.value.as_ref();
            let d = *y.shape().last().expect("layer norm input has a last axis");
            let mut data = vec![0.0; y.numel()];
            let rows = data
                .chunks_mut(d)
                .zip(y.data().chunks(d))
                .zip(g.data().chunks(d))
                .zip(rstd);
            for (((dst, yr), gr), &r) in rows {
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                for ((o, &yy), &gg) in dst.iter_mut().zip(yr).zip(gr) {
                    *o = r * (gg - mg - yy * mgy);
                }
            }
            vec![(*a, Tensor::new(y.shape().to_vec(), data)?)]
        }
        Op::Relu(a) => vec![(
            *a,
            g.zip_map(v(*a), "relu", |gg, x| if x > 0.0 { gg } else { 0.0 })?,
        )],
        Op::Exp(a) => vec![(*a, g.mul(&node.value)?)],
        Op::Square(a) => vec![(*a, g.zip_map(v(*a), "square", |gg, x| 2.0 * x * gg)?)],
        Op::SumAll(a) => vec![(*a, Tensor::full(v(*a).shape(), g.item()?))],
        Op::MeanAll(a) => {
            let n = v(*a).numel() as f64;
            vec![(*a, Tensor::full(v(*a).shape(), g.item()? / n))]
        }
        Op::MeanAxis { a, axis } => {
            let len = v(*a).shape()[*axis];
            vec![(*a, g.scale(1.0 / len as f64).expand_axis(*axis, len)?)]
        }
        Op::RepeatLeading(a) => vec![(*a, g.sum_to_suffix(v(*a).shape())?)],
        Op::Attention { q, k, v: vi, alpha, probs } => {
            let (qv, kv, vv) = (v(*q), v(*k), v(*vi));
            let (batch, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
            let (lk, dv) = (kv.shape()[1], vv.shape()[2]);
            let mut gq = vec![0.0; batch * lq * d];
            let mut gk = vec![0.0; batch * lk * d];
            let mut gv = vec![0.0; batch * lk * dv];
            let mut ds = vec![0.0; lq * lk];
            for t in 0..batch {
                let p = &probs.data()[t * lq * lk..(t + 1) * lq * lk];
                let gt = &g.data()[t * lq * dv..(t + 1) * lq * dv];
                gemm(p, gt, &mut gv[t * lk * dv..(t + 1) * lk * dv], (lk, lq, dv), true, false);
                ds.iter_mut().for_each(|x| *x = 0.0);
                gemm(gt, &vv.data()[t * lk * dv..(t + 1) * lk * dv], &mut ds, (lq, dv, lk), false, true);
                for (drow, prow) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (x, &pp) in drow.iter_mut().zip(prow) {
                        *x = alpha * pp * (*x - dot);
                    }
                }
                gemm(&ds, &kv.data()[t * lk * d..(t + 1) * lk * d], &mut gq[t * lq * d..(t + 1) * lq * d], (lq, lk, d), false, false);
                gemm(&ds, &qv.data()[t * lq * d..(t + 1) * lq * d], &mut gk[t * lk * d..(t + 1) * lk * d], (lk, lq, d), true, false);
            }
            vec![
                (*q, Tensor::new([batch, lq, d], gq)?),
                (*k, Tensor::new([batch, lk, d], gk)?),
                (*vi, Tensor::new([batch, lk, dv], gv)?),
            ]
        }
        Op::SoftmaxCrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let k = probs.shape()[1];
            let scale = g.item()? / targets.len() as f64;
            let mut d = probs.data().to_vec();
            for (b, &t) in targets.iter().enumerate() {
                d[b * k + t] -= 1.0;
            }
            d.iter_mut().for_each(|x| *x *= scale);
            vec![(*logits, Tensor::new(probs.shape().to_vec(), d)?)]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut p = Params::new();
        let w = p.add("w", Tensor::scalar(3.0));
        let tape = Tape::new();
        let b = tape.bind(&p);
        let loss = tape.square(b.var(w));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn product_gradient() {
        let mut p = Params::new();
        let a = p.add("a", Tensor::scalar(2.0));
        let bb = p.add("b", Tensor::scalar(5.0));
        let tape = Tape::new();
        let v = tape.bind(&p);
        let loss = tape.mul(v.var(a), v.var(bb)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).unwrap().item().unwrap(), 5.0);
        assert_eq!(g.wrt(bb).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn shared_use_accumulates() {
        let mut p = Params::new();
        let x = p.add("x", Tensor::scalar(1.5));
        let tape = Tape::new();
        let v = tape.bind(&p);
        let y = tape.mul(v.var(x), v.var(x)).unwrap();
        let z = tape.add(y, v.var(x)).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn unregistered_parameter_reported() {
        let mut p = Params::new();
        let a = p.add("a", Tensor::scalar(1.0));
        let mut q = Params::new();
        q.add("x", Tensor::scalar(0.0));
        let other = q.add("y", Tensor::scalar(0.0));
        let tape = Tape::new();
        let v = tape.bind(&p);
        let g = tape.backward(tape.square(v.var(a))).unwrap();
        assert!(matches!(g.wrt(other), Err(TensorError::NotOnTape(_))));
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut p = Params::new();
        let a = p.add("a", Tensor::scalar(1.0));
        let unused = p.add("u", Tensor::zeros([2, 2]));
        let tape = Tape::new();
        let v = tape.bind(&p);
        let g = tape.backward(tape.square(v.var(a))).unwrap();
        assert_eq!(g.wrt(unused).unwrap(), &Tensor::zeros([2, 2]));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3, 11]));
        let l = tape.softmax_cross_entropy(x, &[0, 5, 10]).unwrap();
        assert!((tape.value(l).item().unwrap() - 11f64.ln()).abs() < 1e-9);
        assert!(tape.softmax_cross_entropy(x, &[0, 11, 1]).is_err());
    }
}
