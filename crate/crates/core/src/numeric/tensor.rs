use std::fmt;

use super::TensorError;

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, len, inner) for reductions and slicing along `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape,
                reason: format!("data has {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn debug_check_finite(self) -> Self {
        debug_assert!(
            self.all_finite(),
            "non-finite value in tensor of shape {:?}",
            self.shape
        );
        self
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(TensorError::mismatch("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::mismatch(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        self.map(|v| v + s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::mismatch(
                "add_assign",
                &self.shape,
                &other.shape,
            ));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn check_suffix(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        let r = other.rank();
        if r > self.rank() || self.shape[self.rank() - r..] != other.shape[..] {
            return Err(TensorError::mismatch(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    /// `self + b` where `b`'s shape is a trailing suffix of `self`'s shape.
    pub fn add_suffix(&self, b: &Tensor) -> Result<Self, TensorError> {
        self.check_suffix(b, "add_broadcast")?;
        let n = b.numel();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data[i % n])
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn mul_suffix(&self, b: &Tensor) -> Result<Self, TensorError> {
        self.check_suffix(b, "mul_broadcast")?;
        let n = b.numel();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * b.data[i % n])
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Sum over leading axes so the result has shape `suffix`.
    pub fn sum_to_suffix(&self, suffix: &[usize]) -> Result<Self, TensorError> {
        let r = suffix.len();
        if r > self.rank() || self.shape[self.rank() - r..] != *suffix {
            return Err(TensorError::mismatch("sum_to_suffix", &self.shape, suffix));
        }
        let n = numel(suffix);
        let mut out = vec![0.0; n];
        for chunk in self.data.chunks(n.max(1)) {
            out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
        }
        Ok(Self {
            shape: suffix.to_vec(),
            data: out,
        })
    }

    /// Tile along a new leading axis of length `n`.
    pub fn repeat_leading(&self, n: usize) -> Self {
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shape);
        let mut data = Vec::with_capacity(n * self.data.len());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self { shape, data }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    /// 2-D matrix product.
    pub fn matmul(&self, b: &Tensor) -> Result<Self, TensorError> {
        if self.rank() != 2 || b.rank() != 2 || self.shape[1] != b.shape[0] {
            return Err(TensorError::mismatch("matmul", &self.shape, &b.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut data = vec![0.0; m * n];
        gemm(&self.data, &b.data, &mut data, (m, k, n), false, false);
        Ok(Self {
            shape: vec![m, n],
            data,
        }
        .debug_check_finite())
    }

    /// Batched product `alpha * op(a) @ op(b)` over rank-3 tensors, where `op` transposes
    /// the last two axes when the corresponding flag is set.
    pub fn bmm(
        &self,
        b: &Tensor,
        trans_a: bool,
        trans_b: bool,
        alpha: f64,
    ) -> Result<Self, TensorError> {
        let err = || TensorError::mismatch("bmm", &self.shape, &b.shape);
        if self.rank() != 3 || b.rank() != 3 || self.shape[0] != b.shape[0] {
            return Err(err());
        }
        let batch = self.shape[0];
        let (m, k) = if trans_a {
            (self.shape[2], self.shape[1])
        } else {
            (self.shape[1], self.shape[2])
        };
        let (kb, n) = if trans_b {
            (b.shape[2], b.shape[1])
        } else {
            (b.shape[1], b.shape[2])
        };
        if k != kb {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * n];
        let (sa, sb, so) = (m * k, k * n, m * n);
        for t in 0..batch {
            gemm(
                &self.data[t * sa..(t + 1) * sa],
                &b.data[t * sb..(t + 1) * sb],
                &mut out[t * so..(t + 1) * so],
                (m, k, n),
                trans_a,
                trans_b,
            );
        }
        if alpha != 1.0 {
            out.iter_mut().for_each(|v| *v *= alpha);
        }
        Ok(Self {
            shape: vec![batch, m, n],
            data: out,
        }
        .debug_check_finite())
    }

    pub fn transpose(&self) -> Result<Self, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape.clone(),
                reason: "rank must be 2".into(),
            });
        }
        self.permute(&[1, 0])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, TensorError> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r
            || perm
                .iter()
                .any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: self.shape.clone(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let mut in_strides = vec![1; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.data.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let mut offset = 0usize;
        for _ in 0..n {
            data.push(self.data[offset]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                offset += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first.shape.clone(),
                reason: format!("axis {axis} out of range"),
            });
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::mismatch("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = split_at_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self, TensorError> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: self.shape.clone(),
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, full, inner) = split_at_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    fn last_dim(&self, op: &'static str) -> Result<usize, TensorError> {
        match self.shape.last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(TensorError::InvalidShape {
                op,
                shape: self.shape.clone(),
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_last(&self) -> Result<Self, TensorError> {
        let d = self.last_dim("softmax")?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        }
        .debug_check_finite())
    }

    /// Normalize each last-axis vector to zero mean and unit variance (no affine).
    /// Returns the output and the per-row reciprocal standard deviations.
    pub fn layer_norm_last(&self, eps: f64) -> Result<(Self, Vec<f64>), TensorError> {
        let d = self.last_dim("layer_norm")?;
        let mut data = self.data.clone();
        let mut rstd = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        Ok((
            Self {
                shape: self.shape.clone(),
                data,
            },
            rstd,
        ))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn exp(&self) -> Self {
        self.map(f64::exp).debug_check_finite()
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Self, TensorError> {
        if axis >= self.rank() || self.shape[axis] == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                shape: self.shape.clone(),
                reason: format!("axis {axis}"),
            });
        }
        let (outer, len, inner) = split_at_axis(&self.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data })
    }

    /// Insert `axis` of length `len` by repeating values (adjoint of a sum over it).
    pub fn expand_axis(&self, axis: usize, len: usize) -> Result<Self, TensorError> {
        if axis > self.rank() {
            return Err(TensorError::InvalidShape {
                op: "expand_axis",
                shape: self.shape.clone(),
                reason: format!("axis {axis}"),
            });
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis..]);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for _ in 0..len {
                data.extend_from_slice(&self.data[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, len);
        Ok(Self { shape, data })
    }

    /// Index of the largest value per last-axis row; ties go to the lowest index.
    pub fn argmax_last(&self) -> Result<Vec<usize>, TensorError> {
        let d = self.last_dim("argmax")?;
        Ok(self
            .data
            .chunks(d)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = t(&[2], &[0.0, 0.0]).softmax_last().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_shift_invariant() {
        let x = t(&[2, 3], &[1.0, -2.0, 3.0, 1000.0, 1001.0, 999.0]);
        let s = x.softmax_last().unwrap();
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = x.add_scalar(37.5).softmax_last().unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_fn([3, 4], |i| (i as f64).sin());
        assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);
        assert!(matches!(
            a.matmul(&a),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bmm_transpose_variants_agree() {
        let a = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.37).cos());
        let b = Tensor::from_fn([2, 4, 5], |i| (i as f64 * 0.11).sin());
        let plain = a.bmm(&b, false, false, 2.0).unwrap();
        let at = a.permute(&[0, 2, 1]).unwrap();
        let bt = b.permute(&[0, 2, 1]).unwrap();
        for (ta, tb, x, y) in [
            (true, false, &at, &b),
            (false, true, &a, &bt),
            (true, true, &at, &bt),
        ] {
            let r = x.bmm(y, ta, tb, 2.0).unwrap();
            for (p, q) in plain.data().iter().zip(r.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let (y, _) = t(&[1, 4], &[3.0, 3.0, 3.0, 3.0])
            .layer_norm_last(1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permute_concat_slice() {
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], 4.0); // (k=0, i=0, j=1) -> x[0,1,0]
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, x);
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 2).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
        assert!(x.slice(1, 2, 2).is_err());
    }

    #[test]
    fn reductions_and_broadcast() {
        let x = Tensor::from_fn([2, 3], |i| i as f64);
        assert_eq!(x.mean_axis(0).unwrap().data(), &[1.5, 2.5, 3.5]);
        assert_eq!(x.mean_axis(1).unwrap().data(), &[1.0, 4.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(
            x.add_suffix(&b).unwrap().data(),
            &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]
        );
        assert_eq!(x.sum_to_suffix(&[3]).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert!(x.add_suffix(&t(&[2], &[1.0, 2.0])).is_err());
        assert_eq!(x.repeat_leading(2).shape(), &[2, 2, 3]);
        assert_eq!(
            x.mean_axis(1).unwrap().expand_axis(1, 3).unwrap().data(),
            &[1.0, 1.0, 1.0, 4.0, 4.0, 4.0]
        );
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(
            t(&[2, 3], &[1.0, 3.0, 3.0, 0.0, 0.0, 0.0])
                .argmax_last()
                .unwrap(),
            vec![1, 0]
        );
    }
}

/// `out += op(a) @ op(b)` for one `m x k` by `k x n` product on raw row-major slices.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], (m, k, n): (usize, usize, usize), trans_a: bool, trans_b: bool) {
    let bt;
    let b = if trans_b {
        // b is stored n x k; transpose so the inner loop runs over contiguous rows
        let mut t = vec![0.0; k * n];
        for j in 0..n {
            for l in 0..k {
                t[l * n + j] = b[j * k + l];
            }
        }
        bt = t;
        &bt[..]
    } else {
        b
    };
    if trans_a {
        // a is stored k x m
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            for i in 0..m {
                let av = a[l * m + i];
                if av != 0.0 {
                    out[i * n..(i + 1) * n].iter_mut().zip(brow).for_each(|(x, &y)| *x += av * y);
                }
            }
        }
    } else if n < 16 && k >= 64 {
        // narrow output: dot products over contiguous rows of a and columns of b
        let mut bt = vec![0.0; k * n];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] += dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
    } else {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let av = a[i * k + l];
                if av != 0.0 {
                    orow.iter_mut().zip(&b[l * n..(l + 1) * n]).for_each(|(x, &y)| *x += av * y);
                }
            }
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
