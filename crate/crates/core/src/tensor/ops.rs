//! Differentiable operations on [`Var`].

use super::graph::{Node, Var};
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Norm floor used by row normalization.
pub const NORM_EPS: f64 = 1e-12;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `a[.., n] + b[n]`
    AddLast(usize, usize),
    /// `a[.., n] * b[n]`
    MulLast(usize, usize),
    /// `a[r, ..] * b[r]`
    MulRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sqrt(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Transpose(usize),
    TransposeLast2(usize),
    Reshape(usize),
    SumAll(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SoftmaxLast(usize),
    LogSoftmaxLast(usize),
    LogSumExpLast(usize),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    GatherFlat(usize, Vec<usize>),
    LayerNormLast(usize),
    L2NormalizeLast(usize),
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c (+)= op(a) · op(b)` with strided views; `c` is row-major `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: the slices cover every index addressed by the given strides and
    // extents; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn logsumexp_row(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'g> Var<'g> {
    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes()[self.id].value)
    }

    fn with2<R>(&self, other: &Var<'g>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.graph.nodes();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push_node(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push_node(value, op, rg)
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'g> {
        let value = self
            .with(|t| Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap());
        self.unary(value, op)
    }

    fn zip_same(
        &self,
        other: &Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        let value = self.with2(other, |a, b| {
            if a.shape() != b.shape() {
                return Err(mismatch(name, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Ok(Tensor::new(a.shape(), data).unwrap())
        })?;
        Ok(self.binary(other, value, op))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_same(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_same(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_same(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_same(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Adds a vector along the last axis (bias add).
    pub fn add_last(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let value = self.with2(bias, |a, b| {
            if b.ndim() != 1 || b.numel() != a.last_dim() {
                return Err(mismatch("add_last", a.shape(), b.shape()));
            }
            let n = b.numel();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
            }
            Ok(Tensor::new(a.shape(), data).unwrap())
        })?;
        Ok(self.binary(bias, value, Op::AddLast(self.id, bias.id)))
    }

    /// Multiplies by a vector along the last axis.
    pub fn mul_last(&self, gain: &Var<'g>) -> Result<Var<'g>> {
        let value = self.with2(gain, |a, b| {
            if b.ndim() != 1 || b.numel() != a.last_dim() {
                return Err(mismatch("mul_last", a.shape(), b.shape()));
            }
            let n = b.numel();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(x, y)| *x *= y);
            }
            Ok(Tensor::new(a.shape(), data).unwrap())
        })?;
        Ok(self.binary(gain, value, Op::MulLast(self.id, gain.id)))
    }

    /// Scales each slice along axis 0 by the matching entry of `scale`.
    pub fn mul_rows(&self, scale: &Var<'g>) -> Result<Var<'g>> {
        let value = self.with2(scale, |a, s| {
            if a.ndim() == 0 || s.numel() != a.shape()[0] {
                return Err(mismatch("mul_rows", a.shape(), s.shape()));
            }
            let inner = a.numel() / a.shape()[0].max(1);
            let mut data = a.data().to_vec();
            for (row, &f) in data.chunks_mut(inner.max(1)).zip(s.data()) {
                row.iter_mut().for_each(|x| *x *= f);
            }
            Ok(Tensor::new(a.shape(), data).unwrap())
        })?;
        Ok(self.binary(scale, value, Op::MulRows(self.id, scale.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.map(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.map(|v| v + c, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var<'g> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'g> {
        self.map(f64::ln, Op::Log(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        self.map(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Var<'g> {
        self.map(softplus, Op::Softplus(self.id))
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.map(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(self).expect("same shape")
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.with2(other, |a, b| {
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, false);
            Ok(Tensor::new(&[m, n], out).unwrap())
        })?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    /// Batched product `[b, m, k] × [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.with2(other, |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(mismatch("bmm", sa, sb));
            }
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    (k, 1),
                    &b.data()[i * k * n..],
                    (n, 1),
                    &mut out[i * m * n..],
                    false,
                );
            }
            Ok(Tensor::new(&[bs, m, n], out).unwrap())
        })?;
        Ok(self.binary(other, value, Op::BatchMatMul(self.id, other.id)))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Var<'g>> {
        let value = self.with(|a| {
            if a.ndim() != 2 {
                return Err(invalid(
                    "transpose",
                    format!("expected 2-D, got {:?}", a.shape()),
                ));
            }
            Ok(transpose2(a))
        })?;
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    /// Swaps the last two axes of a 3-D tensor.
    pub fn transpose_last2(&self) -> Result<Var<'g>> {
        let value = self.with(|a| {
            if a.ndim() != 3 {
                return Err(invalid(
                    "transpose_last2",
                    format!("expected 3-D, got {:?}", a.shape()),
                ));
            }
            Ok(transpose_last2(a))
        })?;
        Ok(self.unary(value, Op::TransposeLast2(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.with(|a| a.clone().reshape(shape))?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'g> {
        let value = self.with(|a| Tensor::scalar(a.data().iter().sum()));
        self.unary(value, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.with(Tensor::numel) as f64;
        self.sum().scale(1.0 / n)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'g>> {
        let value = self.with(|a| {
            if axis >= a.ndim() {
                return Err(invalid(
                    "reduce",
                    format!("axis {axis} out of range for {:?}", a.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(a.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &a.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    out[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            Ok(Tensor::new(&shape, out).unwrap())
        })?;
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        Ok(self.unary(value, op))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, true)
    }

    pub fn softmax_last(&self) -> Var<'g> {
        let value = self.with(|a| {
            let n = a.last_dim();
            let mut out = vec![0.0; a.numel()];
            for (x, o) in a.data().chunks(n).zip(out.chunks_mut(n)) {
                softmax_row(x, o);
            }
            Tensor::new(a.shape(), out).unwrap()
        });
        self.unary(value, Op::SoftmaxLast(self.id))
    }

    pub fn log_softmax_last(&self) -> Var<'g> {
        let value = self.with(|a| {
            let n = a.last_dim();
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(n) {
                let lse = logsumexp_row(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(a.shape(), out).unwrap()
        });
        self.unary(value, Op::LogSoftmaxLast(self.id))
    }

    /// Log-sum-exp over the last axis; the axis is removed.
    pub fn logsumexp_last(&self) -> Var<'g> {
        let value = self.with(|a| {
            let n = a.last_dim();
            let out = a.data().chunks(n).map(logsumexp_row).collect();
            let shape = &a.shape()[..a.ndim().saturating_sub(1)];
            Tensor::new(shape, out).unwrap()
        });
        self.unary(value, Op::LogSumExpLast(self.id))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let graph = first.graph;
        let value = {
            let nodes = graph.nodes();
            let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            let base = tensors[0].shape();
            if axis >= base.len() {
                return Err(invalid(
                    "concat",
                    format!("axis {axis} out of range for {base:?}"),
                ));
            }
            for t in &tensors[1..] {
                let s = t.shape();
                let ok = s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !ok {
                    return Err(mismatch("concat", base, s));
                }
            }
            let (outer, _, inner) = split_axis(base, axis);
            let total: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in &tensors {
                    let len = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = base.to_vec();
            shape[axis] = total;
            Tensor::new(&shape, out).unwrap()
        };
        let rg = parts.iter().any(Var::requires_grad);
        Ok(graph.push_node(
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let value = self.with(|a| {
            if axis >= a.ndim() || start + len > a.shape()[axis] {
                return Err(invalid(
                    "slice",
                    format!(
                        "[{start}, {}) on axis {axis} of {:?}",
                        start + len,
                        a.shape()
                    ),
                ));
            }
            let (outer, alen, inner) = split_axis(a.shape(), axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                out.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Ok(Tensor::new(&shape, out).unwrap())
        })?;
        Ok(self.unary(
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Selects rows of a 2-D tensor (embedding lookup).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'g>> {
        let value = self.with(|a| {
            if a.ndim() != 2 {
                return Err(invalid(
                    "gather_rows",
                    format!("expected 2-D, got {:?}", a.shape()),
                ));
            }
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                if i >= rows {
                    return Err(invalid("gather_rows", format!("index {i} >= {rows}")));
                }
                out.extend_from_slice(a.row(i));
            }
            Ok(Tensor::new(&[idx.len(), cols], out).unwrap())
        })?;
        Ok(self.unary(value, Op::GatherRows(self.id, idx.to_vec())))
    }

    /// `out[idx[e]] += self[e]` over rows, producing `n_out` rows.
    pub fn scatter_add_rows(&self, idx: &[usize], n_out: usize) -> Result<Var<'g>> {
        let value = self.with(|a| {
            if a.ndim() != 2 || a.shape()[0] != idx.len() {
                return Err(mismatch("scatter_add_rows", a.shape(), &[idx.len()]));
            }
            let cols = a.shape()[1];
            let mut out = vec![0.0; n_out * cols];
            for (e, &dst) in idx.iter().enumerate() {
                if dst >= n_out {
                    return Err(invalid(
                        "scatter_add_rows",
                        format!("index {dst} >= {n_out}"),
                    ));
                }
                out[dst * cols..(dst + 1) * cols]
                    .iter_mut()
                    .zip(a.row(e))
                    .for_each(|(o, v)| *o += v);
            }
            Ok(Tensor::new(&[n_out, cols], out).unwrap())
        })?;
        Ok(self.unary(value, Op::ScatterAddRows(self.id, idx.to_vec())))
    }

    /// Picks flat (row-major) positions into a 1-D result.
    pub fn gather_flat(&self, idx: &[usize]) -> Result<Var<'g>> {
        let value = self.with(|a| {
            let n = a.numel();
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                if i >= n {
                    return Err(invalid("gather_flat", format!("index {i} >= {n}")));
                }
                out.push(a.data()[i]);
            }
            Ok(Tensor::vector(out))
        })?;
        Ok(self.unary(value, Op::GatherFlat(self.id, idx.to_vec())))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm_last(&self) -> Var<'g> {
        let value = self.with(|a| {
            let n = a.last_dim();
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
            Tensor::new(a.shape(), out).unwrap()
        });
        self.unary(value, Op::LayerNormLast(self.id))
    }

    /// Divides every last-axis vector by its Euclidean norm (floored at [`NORM_EPS`]).
    pub fn l2_normalize_last(&self) -> Var<'g> {
        let value = self.with(|a| {
            let n = a.last_dim();
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(n) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            Tensor::new(a.shape(), out).unwrap()
        });
        self.unary(value, Op::L2NormalizeLast(self.id))
    }

    /// Cosine similarity between two vectors of equal length.
    pub fn cosine(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let a = self
            .reshape(&[1, self.with(Tensor::numel)])?
            .l2_normalize_last();
        let b = other
            .reshape(&[1, other.with(Tensor::numel)])?
            .l2_normalize_last();
        Ok(a.mul(&b)?.sum())
    }

    /// Pairwise cosine similarities between the rows of two 2-D tensors.
    pub fn cosine_matrix(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let a = self.l2_normalize_last();
        let b = other.l2_normalize_last();
        a.matmul(&b.t()?)
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn transpose2(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out).unwrap()
}

fn transpose_last2_data(data: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * m * n];
    for k in 0..b {
        let src = &data[k * m * n..(k + 1) * m * n];
        let dst = &mut out[k * m * n..(k + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn transpose_last2(a: &Tensor) -> Tensor {
    let s = a.shape();
    Tensor::new(
        &[s[0], s[2], s[1]],
        transpose_last2_data(a.data(), s[0], s[1], s[2]),
    )
    .unwrap()
}

/// Propagates the output gradient `g` of one node to its inputs.
pub(crate) fn backward(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    nodes: &[Node],
    emit: &mut dyn FnMut(usize, Vec<f64>),
) {
    let val = |id: usize| &nodes[id].value;
    let wants = |id: usize| nodes[id].requires_grad;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                emit(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
            }
            if wants(*b) {
                emit(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                emit(*a, g.iter().zip(vb).map(|(g, y)| g / y).collect());
            }
            if wants(*b) {
                let d = g
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                emit(*b, d);
            }
        }
        Op::AddLast(a, b) => {
            emit(*a, g.to_vec());
            if wants(*b) {
                let n = val(*b).numel();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                emit(*b, db);
            }
        }
        Op::MulLast(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let n = vb.len();
            if wants(*a) {
                let mut da = g.to_vec();
                for row in da.chunks_mut(n) {
                    row.iter_mut().zip(vb).for_each(|(d, y)| *d *= y);
                }
                emit(*a, da);
            }
            if wants(*b) {
                let mut db = vec![0.0; n];
                for (grow, xrow) in g.chunks(n).zip(va.chunks(n)) {
                    for j in 0..n {
                        db[j] += grow[j] * xrow[j];
                    }
                }
                emit(*b, db);
            }
        }
        Op::MulRows(a, s) => {
            let (va, vs) = (val(*a).data(), val(*s).data());
            let inner = (va.len() / vs.len().max(1)).max(1);
            if wants(*a) {
                let mut da = g.to_vec();
                for (row, f) in da.chunks_mut(inner).zip(vs) {
                    row.iter_mut().for_each(|d| *d *= f);
                }
                emit(*a, da);
            }
            if wants(*s) {
                let ds = g
                    .chunks(inner)
                    .zip(va.chunks(inner))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(g, x)| g * x).sum())
                    .collect();
                emit(*s, ds);
            }
        }
        Op::Scale(a, c) => emit(*a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => emit(*a, g.to_vec()),
        Op::Exp(a) => emit(*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
        Op::Log(a) => emit(
            *a,
            g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect(),
        ),
        Op::Relu(a) => emit(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        Op::Tanh(a) => emit(
            *a,
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        ),
        Op::Sigmoid(a) => emit(
            *a,
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        ),
        Op::Softplus(a) => emit(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(g, &x)| g * sigmoid(x))
                .collect(),
        ),
        Op::Sqrt(a) => emit(
            *a,
            g.iter().zip(out.data()).map(|(g, y)| g * 0.5 / y).collect(),
        ),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), tb.data(), (1, n), &mut da, false);
                emit(*a, da);
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), (1, k), g, (n, 1), &mut db, false);
                emit(*b, db);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
            if wants(*a) {
                let mut da = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        (n, 1),
                        &tb.data()[i * k * n..],
                        (1, n),
                        &mut da[i * m * k..],
                        false,
                    );
                }
                emit(*a, da);
            }
            if wants(*b) {
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    gemm(
                        k,
                        m,
                        n,
                        &ta.data()[i * m * k..],
                        (1, k),
                        &g[i * m * n..],
                        (n, 1),
                        &mut db[i * k * n..],
                        false,
                    );
                }
                emit(*b, db);
            }
        }
        Op::Transpose(a) => {
            let s = out.shape();
            let gt = Tensor::new(s, g.to_vec()).unwrap();
            emit(*a, transpose2(&gt).into_data());
        }
        Op::TransposeLast2(a) => {
            let s = out.shape();
            emit(*a, transpose_last2_data(g, s[0], s[1], s[2]));
        }
        Op::Reshape(a) => emit(*a, g.to_vec()),
        Op::SumAll(a) => emit(*a, vec![g[0]; val(*a).numel()]),
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
            let f = if matches!(op, Op::MeanAxis(..)) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut da = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, v)| *d = v * f);
                }
            }
            emit(*a, da);
        }
        Op::SoftmaxLast(a) => {
            let n = out.last_dim();
            let mut da = vec![0.0; g.len()];
            for ((d, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for j in 0..n {
                    d[j] = yr[j] * (gr[j] - dot);
                }
            }
            emit(*a, da);
        }
        Op::LogSoftmaxLast(a) => {
            let n = out.last_dim();
            let mut da = vec![0.0; g.len()];
            for ((d, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let total: f64 = gr.iter().sum();
                for j in 0..n {
                    d[j] = gr[j] - yr[j].exp() * total;
                }
            }
            emit(*a, da);
        }
        Op::LogSumExpLast(a) => {
            let x = val(*a);
            let n = x.last_dim();
            let mut da = vec![0.0; x.numel()];
            for ((d, xr), (&gr, &lse)) in da
                .chunks_mut(n)
                .zip(x.data().chunks(n))
                .zip(g.iter().zip(out.data()))
            {
                for j in 0..n {
                    d[j] = gr * (xr[j] - lse).exp();
                }
            }
            emit(*a, da);
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if wants(p) {
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    emit(p, dp);
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let (outer, alen, inner) = split_axis(val(*input).shape(), *axis);
            let len = out.shape()[*axis];
            let mut da = vec![0.0; outer * alen * inner];
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                da[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            emit(*input, da);
        }
        Op::GatherRows(a, idx) => {
            let x = val(*a);
            let cols = x.shape()[1];
            let mut da = vec![0.0; x.numel()];
            for (r, &i) in idx.iter().enumerate() {
                da[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(&g[r * cols..(r + 1) * cols])
                    .for_each(|(d, v)| *d += v);
            }
            emit(*a, da);
        }
        Op::ScatterAddRows(a, idx) => {
            let cols = out.shape()[1];
            let mut da = Vec::with_capacity(idx.len() * cols);
            for &dst in idx {
                da.extend_from_slice(&g[dst * cols..(dst + 1) * cols]);
            }
            emit(*a, da);
        }
        Op::GatherFlat(a, idx) => {
            let mut da = vec![0.0; val(*a).numel()];
            for (k, &i) in idx.iter().enumerate() {
                da[i] += g[k];
            }
            emit(*a, da);
        }
        Op::LayerNormLast(a) => {
            let x = val(*a);
            let n = x.last_dim();
            let mut da = vec![0.0; x.numel()];
            for ((d, gr), (xr, yr)) in da
                .chunks_mut(n)
                .zip(g.chunks(n))
                .zip(x.data().chunks(n).zip(out.data().chunks(n)))
            {
                let mean = xr.iter().sum::<f64>() / n as f64;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let gmean = gr.iter().sum::<f64>() / n as f64;
                let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                for j in 0..n {
                    d[j] = inv * (gr[j] - gmean - yr[j] * gy);
                }
            }
            emit(*a, da);
        }
        Op::L2NormalizeLast(a) => {
            let x = val(*a);
            let n = x.last_dim();
            let mut da = vec![0.0; x.numel()];
            for ((d, gr), (xr, yr)) in da
                .chunks_mut(n)
                .zip(g.chunks(n))
                .zip(x.data().chunks(n).zip(out.data().chunks(n)))
            {
                let raw = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if raw > NORM_EPS {
                    let gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        d[j] = (gr[j] - yr[j] * gy) / raw;
                    }
                } else {
                    for j in 0..n {
                        d[j] = gr[j] / NORM_EPS;
                    }
                }
            }
            emit(*a, da);
        }
    }
}
