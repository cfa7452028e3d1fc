//! Forward and backward kernels for every primitive recorded on a [`Graph`](super::Graph).
//!
//! Broadcasting is limited to a trailing-shape operand: for the binary
//! elementwise ops the right operand may have a shape equal to a suffix of the
//! left operand's shape, and is then applied to every leading-batch slice.

use crate::error::{DipError, Result};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{numel, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Offset(f64),
    Pow(f64),
    Sqrt,
    Sigmoid,
    Gelu,
    Relu,
    /// Along the last axis.
    Softmax,
    /// Zero-mean unit-variance along the last axis, no affine.
    LayerNorm(f64),
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Slice { axis: usize, start: usize, len: usize },
    Concat(usize),
    /// New leading axis of the given extent.
    Repeat(usize),
    SumLast,
    MeanLast,
    SumAll,
    MeanAll,
    /// Flat-index gather into a rank-1 result.
    Gather(Vec<usize>),
    /// Mean softmax cross-entropy of `[B, C]` logits against labels.
    CrossEntropy(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Pow(_) => "pow",
            Op::Sqrt => "sqrt",
            Op::Sigmoid => "sigmoid",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Repeat(_) => "repeat",
            Op::SumLast => "sum_last",
            Op::MeanLast => "mean_last",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::Gather(_) => "gather",
            Op::CrossEntropy(_) => "cross_entropy",
        }
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Shape of a matmul result, or a description of the mismatch.
fn matmul_shape(a: &[usize], b: &[usize]) -> std::result::Result<Vec<usize>, String> {
    if a.len() < 2 || b.len() < 2 {
        return Err(format!("operands must be at least rank 2, got {a:?} x {b:?}"));
    }
    let k = a[a.len() - 1];
    if b.len() == 2 {
        if b[0] != k {
            return Err(format!("inner extents differ: {a:?} x {b:?}"));
        }
        let mut out = a[..a.len() - 1].to_vec();
        out.push(b[1]);
        return Ok(out);
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] || b[b.len() - 2] != k {
        return Err(format!("batched operands incompatible: {a:?} x {b:?}"));
    }
    let mut out = a[..a.len() - 1].to_vec();
    out.push(b[b.len() - 1]);
    Ok(out)
}

pub(crate) fn permuted_shape(shape: &[usize], perm: &[usize]) -> Option<Vec<usize>> {
    if perm.len() != shape.len() {
        return None;
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return None;
        }
        seen[p] = true;
    }
    Some(perm.iter().map(|&p| shape[p]).collect())
}

/// Validates operand shapes and returns the output shape.
pub(crate) fn infer_shape<T: Scalar>(op: &Op, x: &[&Tensor<T>]) -> Result<Vec<usize>> {
    let err = |d: String| DipError::shape(op.name(), d);
    let arity = match op {
        Op::Leaf => 0,
        Op::MatMul | Op::Add | Op::Sub | Op::Mul => 2,
        Op::Concat(_) => x.len().max(1),
        _ => 1,
    };
    if x.len() != arity {
        return Err(err(format!("expected {arity} operands, got {}", x.len())));
    }
    let s0 = x.first().map(|t| t.shape()).unwrap_or(&[]);
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => matmul_shape(s0, x[1].shape()).map_err(err)?,
        Op::Add | Op::Sub | Op::Mul => {
            if !is_suffix(s0, x[1].shape()) {
                return Err(err(format!("{:?} does not broadcast over {:?}", x[1].shape(), s0)));
            }
            s0.to_vec()
        }
        Op::Scale(_)
        | Op::Offset(_)
        | Op::Pow(_)
        | Op::Sqrt
        | Op::Sigmoid
        | Op::Gelu
        | Op::Relu => s0.to_vec(),
        Op::Softmax | Op::LayerNorm(_) => {
            if s0.is_empty() || last_dim(s0) == 0 {
                return Err(err(format!("needs a nonempty last axis, got {s0:?}")));
            }
            s0.to_vec()
        }
        Op::Reshape(to) => {
            if numel(to) != numel(s0) {
                return Err(err(format!("{s0:?} -> {to:?}")));
            }
            to.clone()
        }
        Op::Permute(perm) => permuted_shape(s0, perm)
            .ok_or_else(|| err(format!("invalid permutation {perm:?} for {s0:?}")))?,
        Op::Slice { axis, start, len } => {
            if *axis >= s0.len() || start + len > s0[*axis] {
                return Err(err(format!("[{start}, {}) on axis {axis} of {s0:?}", start + len)));
            }
            let mut out = s0.to_vec();
            out[*axis] = *len;
            out
        }
        Op::Concat(axis) => {
            if *axis >= s0.len() {
                return Err(err(format!("axis {axis} out of range for {s0:?}")));
            }
            let mut out = s0.to_vec();
            out[*axis] = 0;
            for t in x {
                let s = t.shape();
                let same = s.len() == s0.len()
                    && s.iter().zip(s0).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                if !same {
                    return Err(err(format!("{s:?} incompatible with {s0:?} on axis {axis}")));
                }
                out[*axis] += s[*axis];
            }
            out
        }
        Op::Repeat(n) => {
            let mut out = vec![*n];
            out.extend_from_slice(s0);
            out
        }
        Op::SumLast | Op::MeanLast => {
            if s0.is_empty() {
                return Err(err("cannot reduce a rank-0 tensor".into()));
            }
            s0[..s0.len() - 1].to_vec()
        }
        Op::SumAll | Op::MeanAll => Vec::new(),
        Op::Gather(idx) => {
            let n = numel(s0);
            if let Some(bad) = idx.iter().find(|&&i| i >= n) {
                return Err(err(format!("index {bad} out of range for {n} elements")));
            }
            vec![idx.len()]
        }
        Op::CrossEntropy(labels) => {
            if s0.len() != 2 || s0[0] != labels.len() || s0[0] == 0 {
                return Err(err(format!("logits {s0:?} vs {} labels", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= s0[1]) {
                return Err(DipError::LabelOutOfRange { label: bad, classes: s0[1] });
            }
            Vec::new()
        }
    })
}

pub(crate) fn forward<T: Scalar>(op: &Op, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = infer_shape(op, x)?;
    let data: Vec<T> = match op {
        Op::Leaf => return Err(DipError::shape("leaf", "leaves carry their own value")),
        Op::MatMul => matmul_forward(x[0], x[1], &shape),
        Op::Add => binary(x[0], x[1], |a, b| a + b),
        Op::Sub => binary(x[0], x[1], |a, b| a - b),
        Op::Mul => binary(x[0], x[1], |a, b| a * b),
        Op::Scale(c) => {
            let c = T::of(*c);
            x[0].data().iter().map(|&v| v * c).collect()
        }
        Op::Offset(c) => {
            let c = T::of(*c);
            x[0].data().iter().map(|&v| v + c).collect()
        }
        Op::Pow(p) => {
            let p = *p;
            x[0].data().iter().map(|&v| pow(v, p)).collect()
        }
        Op::Sqrt => x[0].data().iter().map(|v| v.sqrt()).collect(),
        Op::Sigmoid => x[0].data().iter().map(|&v| sigmoid(v)).collect(),
        Op::Gelu => x[0].data().iter().map(|&v| gelu(v)).collect(),
        Op::Relu => x[0].data().iter().map(|&v| v.max(T::zero())).collect(),
        Op::Softmax => softmax_rows(x[0].data(), last_dim(&shape)),
        Op::LayerNorm(eps) => layer_norm_rows(x[0].data(), last_dim(&shape), T::of(*eps)),
        Op::Reshape(_) => x[0].data().to_vec(),
        Op::Permute(perm) => permute_data(x[0].data(), x[0].shape(), perm),
        Op::Slice { axis, start, len } => slice_data(x[0], *axis, *start, *len),
        Op::Concat(axis) => concat_data(x, *axis),
        Op::Repeat(n) => {
            let mut out = Vec::with_capacity(n * x[0].len());
            for _ in 0..*n {
                out.extend_from_slice(x[0].data());
            }
            out
        }
        Op::SumLast => x[0].data().chunks(last_dim(x[0].shape())).map(|c| c.iter().copied().sum()).collect(),
        Op::MeanLast => {
            let n = last_dim(x[0].shape());
            let inv = T::one() / T::of(n as f64);
            x[0].data().chunks(n).map(|c| c.iter().copied().sum::<T>() * inv).collect()
        }
        Op::SumAll => vec![x[0].data().iter().copied().sum()],
        Op::MeanAll => {
            let n = T::of(x[0].len() as f64);
            vec![x[0].data().iter().copied().sum::<T>() / n]
        }
        Op::Gather(idx) => idx.iter().map(|&i| x[0].data()[i]).collect(),
        Op::CrossEntropy(labels) => {
            let classes = x[0].shape()[1];
            let mut total = T::zero();
            for (row, &label) in x[0].data().chunks(classes).zip(labels) {
                total += log_sum_exp(row) - row[label];
            }
            vec![total / T::of(labels.len() as f64)]
        }
    };
    Tensor::new(&shape, data)
}

/// Input gradients for one node; `need[i]` marks which inputs want one.
pub(crate) fn backward<T: Scalar>(
    op: &Op,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    dy: &Tensor<T>,
    need: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let like = |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape(), data).expect("gradient shape");
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let g = dy.data();
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => matmul_backward(x[0], x[1], dy, want(0), want(1)),
        Op::Add => vec![
            want(0).then(|| dy.clone().reshape(x[0].shape()).expect("same shape")),
            want(1).then(|| like(x[1], reduce_to_suffix(g, x[1].len()))),
        ],
        Op::Sub => vec![
            want(0).then(|| dy.clone().reshape(x[0].shape()).expect("same shape")),
            want(1).then(|| like(x[1], reduce_to_suffix(g, x[1].len()).into_iter().map(|v| -v).collect())),
        ],
        Op::Mul => {
            let (a, b) = (x[0], x[1]);
            let da = want(0).then(|| {
                let n = b.len();
                let data = g.iter().enumerate().map(|(i, &d)| d * b.data()[i % n]).collect();
                like(a, data)
            });
            let db = want(1).then(|| {
                let prod: Vec<T> = g.iter().zip(a.data()).map(|(&d, &v)| d * v).collect();
                like(b, reduce_to_suffix(&prod, b.len()))
            });
            vec![da, db]
        }
        Op::Scale(c) => {
            let c = T::of(*c);
            vec![Some(like(x[0], g.iter().map(|&d| d * c).collect()))]
        }
        Op::Offset(_) | Op::Reshape(_) => vec![Some(like(x[0], g.to_vec()))],
        Op::Pow(p) => {
            let p = *p;
            let pt = T::of(p);
            let data = g
                .iter()
                .zip(x[0].data())
                .map(|(&d, &v)| if p == 2.0 { d * (v + v) } else { d * pt * pow(v, p - 1.0) })
                .collect();
            vec![Some(like(x[0], data))]
        }
        Op::Sqrt => {
            let half = T::of(0.5);
            let data = g
                .iter()
                .zip(y.data())
                .map(|(&d, &s)| if s > T::zero() { d * half / s } else { T::zero() })
                .collect();
            vec![Some(like(x[0], data))]
        }
        Op::Sigmoid => {
            let data = g.iter().zip(y.data()).map(|(&d, &s)| d * s * (T::one() - s)).collect();
            vec![Some(like(x[0], data))]
        }
        Op::Gelu => {
            let data = g.iter().zip(x[0].data()).map(|(&d, &v)| d * gelu_grad(v)).collect();
            vec![Some(like(x[0], data))]
        }
        Op::Relu => {
            let data = g
                .iter()
                .zip(x[0].data())
                .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                .collect();
            vec![Some(like(x[0], data))]
        }
        Op::Softmax => {
            let n = last_dim(y.shape());
            let mut out = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(n).zip(g.chunks(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                out.extend(yr.iter().zip(gr).map(|(&s, &d)| s * (d - dot)));
            }
            vec![Some(like(x[0], out))]
        }
        Op::LayerNorm(eps) => {
            let n = last_dim(y.shape());
            let nt = T::of(n as f64);
            let eps = T::of(*eps);
            let mut out = Vec::with_capacity(y.len());
            for ((xr, yr), gr) in x[0].data().chunks(n).zip(y.data().chunks(n)).zip(g.chunks(n)) {
                let mean = xr.iter().copied().sum::<T>() / nt;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let inv_std = T::one() / (var + eps).sqrt();
                let g_mean = gr.iter().copied().sum::<T>() / nt;
                let gy_mean = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nt;
                out.extend(gr.iter().zip(yr).map(|(&d, &v)| inv_std * (d - g_mean - v * gy_mean)));
            }
            vec![Some(like(x[0], out))]
        }
        Op::Permute(perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![Some(like(x[0], permute_data(g, y.shape(), &inverse)))]
        }
        Op::Slice { axis, start, len } => {
            let s = x[0].shape();
            let outer = numel(&s[..*axis]);
            let inner = numel(&s[axis + 1..]);
            let mut out = vec![T::zero(); x[0].len()];
            for o in 0..outer {
                let dst = (o * s[*axis] + start) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(like(x[0], out))]
        }
        Op::Concat(axis) => {
            let ys = y.shape();
            let outer = numel(&ys[..*axis]);
            let inner = numel(&ys[axis + 1..]);
            let mut offset = 0;
            x.iter()
                .enumerate()
                .map(|(i, t)| {
                    let width = t.shape()[*axis] * inner;
                    let grad = want(i).then(|| {
                        let mut out = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let at = o * ys[*axis] * inner + offset;
                            out.extend_from_slice(&g[at..at + width]);
                        }
                        like(t, out)
                    });
                    offset += width;
                    grad
                })
                .collect()
        }
        Op::Repeat(_) => vec![Some(like(x[0], reduce_to_suffix(g, x[0].len())))],
        Op::SumLast | Op::MeanLast => {
            let n = last_dim(x[0].shape());
            let scale = if matches!(op, Op::MeanLast) { T::one() / T::of(n as f64) } else { T::one() };
            let mut out = Vec::with_capacity(x[0].len());
            for &d in g {
                out.extend(std::iter::repeat_n(d * scale, n));
            }
            vec![Some(like(x[0], out))]
        }
        Op::SumAll | Op::MeanAll => {
            let scale = if matches!(op, Op::MeanAll) { T::one() / T::of(x[0].len() as f64) } else { T::one() };
            vec![Some(Tensor::full(x[0].shape(), g[0] * scale))]
        }
        Op::Gather(idx) => {
            let mut out = vec![T::zero(); x[0].len()];
            for (&i, &d) in idx.iter().zip(g) {
                out[i] += d;
            }
            vec![Some(like(x[0], out))]
        }
        Op::CrossEntropy(labels) => {
            let classes = x[0].shape()[1];
            let scale = g[0] / T::of(labels.len() as f64);
            let mut out = Vec::with_capacity(x[0].len());
            for (row, &label) in x[0].data().chunks(classes).zip(labels) {
                let probs = softmax_rows(row, classes);
                out.extend(probs.iter().enumerate().map(|(c, &p)| {
                    let target = if c == label { T::one() } else { T::zero() };
                    (p - target) * scale
                }));
            }
            vec![Some(like(x[0], out))]
        }
    }
}

#[inline]
fn pow<T: Scalar>(v: T, p: f64) -> T {
    if p == 2.0 {
        v * v
    } else if p == -1.0 {
        T::one() / v
    } else {
        v.powf(T::of(p))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Scalar>(v: T) -> T {
    let u = T::of(GELU_C) * (v + T::of(GELU_A) * v * v * v);
    T::of(0.5) * v * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(v: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (v + a * v * v * v)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * v * v)
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Max-subtracted softmax over consecutive rows of width `n`.
pub(crate) fn softmax_rows<T: Scalar>(data: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - m).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    out
}

pub(crate) fn layer_norm_rows<T: Scalar>(data: &[T], n: usize, eps: T) -> Vec<T> {
    let nt = T::of(n as f64);
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let mean = row.iter().copied().sum::<T>() / nt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
        let inv_std = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * inv_std));
    }
    out
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    let n = b.len();
    if n == a.len() {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = Vec::with_capacity(a.len());
    for chunk in a.data().chunks(n) {
        out.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
    }
    out
}

/// Sums a gradient over its leading-batch slices down to `n` trailing elements.
fn reduce_to_suffix<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out_shape: &[usize]) -> Vec<T> {
    let k = last_dim(a.shape());
    let n = last_dim(b.shape());
    let mut out = vec![T::zero(); numel(out_shape)];
    if b.rank() == 2 {
        let rows = a.len() / k.max(1);
        gemm(rows, k, n, MatView::row_major(a.data(), k), MatView::row_major(b.data(), n), &mut out, false);
        return out;
    }
    let m = a.shape()[a.rank() - 2];
    let batches = numel(&a.shape()[..a.rank() - 2]);
    for i in 0..batches {
        let av = MatView::row_major(&a.data()[i * m * k..(i + 1) * m * k], k);
        let bv = MatView::row_major(&b.data()[i * k * n..(i + 1) * k * n], n);
        gemm(m, k, n, av, bv, &mut out[i * m * n..(i + 1) * m * n], false);
    }
    out
}

fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> Vec<Option<Tensor<T>>> {
    let k = last_dim(a.shape());
    let n = last_dim(b.shape());
    let g = dy.data();
    let mut da = want_a.then(|| vec![T::zero(); a.len()]);
    let mut db = want_b.then(|| vec![T::zero(); b.len()]);
    if b.rank() == 2 {
        let rows = a.len() / k.max(1);
        if let Some(da) = da.as_mut() {
            // dA = dY * B^T
            gemm(rows, n, k, MatView::row_major(g, n), MatView::transposed(b.data(), n), da, false);
        }
        if let Some(db) = db.as_mut() {
            // dB = A^T * dY
            gemm(k, rows, n, MatView::transposed(a.data(), k), MatView::row_major(g, n), db, false);
        }
    } else {
        let m = a.shape()[a.rank() - 2];
        let batches = numel(&a.shape()[..a.rank() - 2]);
        for i in 0..batches {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            if let Some(da) = da.as_mut() {
                let dst = &mut da[i * m * k..(i + 1) * m * k];
                gemm(m, n, k, MatView::row_major(gi, n), MatView::transposed(bi, n), dst, false);
            }
            if let Some(db) = db.as_mut() {
                let dst = &mut db[i * k * n..(i + 1) * k * n];
                gemm(k, m, n, MatView::transposed(ai, k), MatView::row_major(gi, n), dst, false);
            }
        }
    }
    vec![
        da.map(|d| Tensor::new(a.shape(), d).expect("shape")),
        db.map(|d| Tensor::new(b.shape(), d).expect("shape")),
    ]
}

pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    // Innermost output axis is copied in a tight loop.
    let inner_n = out_shape[rank - 1];
    let inner_s = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < total {
        for t in 0..inner_n {
            out.push(data[base + t * inner_s]);
        }
        // advance the outer multi-index
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn slice_data<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Vec<T> {
    let s = x.shape();
    let outer = numel(&s[..axis]);
    let inner = numel(&s[axis + 1..]);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let at = (o * s[axis] + start) * inner;
        out.extend_from_slice(&x.data()[at..at + len * inner]);
    }
    out
}

fn concat_data<T: Scalar>(x: &[&Tensor<T>], axis: usize) -> Vec<T> {
    let s0 = x[0].shape();
    let outer = numel(&s0[..axis]);
    let inner = numel(&s0[axis + 1..]);
    let mut out = Vec::with_capacity(x.iter().map(|t| t.len()).sum());
    for o in 0..outer {
        for t in x {
            let width = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * width..(o + 1) * width]);
        }
    }
    out
}
