//! Implicit positions: where on the patch grid each DiP feature lives.
//!
//! For DiP `k`, every patch `(i, j)` gets the correlation
//! `c = 1 / (||dip_k - f_ij|| + eps)`. A softmax over all `N_H * N_W`
//! correlations jointly yields the weight matrix `W_k`, and the implicit
//! position is the `W_k`-weighted mean of the normalized patch locations
//! `(i / N_H, j / N_W)`. The first coordinate runs along image rows.

use serde::{Deserialize, Serialize};

use crate::autograd::{ops::softmax_rows, Graph, Var};
use crate::error::{DipError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CORRELATION_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        PatchGrid { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized location of 1-based patch `(i, j)`.
    pub fn location(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 / self.rows as f64, j as f64 / self.cols as f64)
    }

    /// `[N, 2]` locations in row-major patch order.
    pub fn locations<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(2 * self.len());
        for i in 1..=self.rows {
            for j in 1..=self.cols {
                let (x, y) = self.location(i, j);
                data.push(T::of(x));
                data.push(T::of(y));
            }
        }
        Tensor::new(&[self.len(), 2], data).expect("grid shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitPosition {
    pub x: f64,
    pub y: f64,
}

impl ImplicitPosition {
    pub fn new(x: f64, y: f64) -> Self {
        ImplicitPosition { x, y }
    }
}

/// Inverse-distance correlation of one DiP feature `[D]` against patch features
/// `[.., D]`; the result drops the feature axis.
pub fn correlation<T: Scalar>(dip: &[T], patches: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = dip.len();
    if eps < 0.0 {
        return Err(DipError::Config(format!("correlation epsilon must be nonnegative, got {eps}")));
    }
    let s = patches.shape();
    if s.last() != Some(&d) || d == 0 {
        return Err(DipError::shape("correlation", format!("dip [{d}] vs patches {s:?}")));
    }
    if !patches.is_finite() || dip.iter().any(|v| !v.is_finite()) {
        return Err(DipError::NonFinite("correlation features".into()));
    }
    let eps = T::of(eps);
    let out: Vec<T> = patches
        .data()
        .chunks(d)
        .map(|f| {
            let sq: T = f.iter().zip(dip).map(|(&a, &b)| (a - b) * (a - b)).sum();
            T::one() / (sq.sqrt() + eps)
        })
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DipError::NonFinite("correlation (zero distance with zero epsilon)".into()));
    }
    Tensor::new(&s[..s.len() - 1], out)
}

/// Softmax over every entry of `c` jointly.
pub fn position_weights<T: Scalar>(c: &Tensor<T>) -> Tensor<T> {
    let data = softmax_rows(c.data(), c.len().max(1));
    Tensor::new(c.shape(), data).expect("same shape")
}

/// `W`-weighted mean of the grid locations; `w` has `grid.len()` entries in row-major order.
pub fn implicit_position<T: Scalar>(w: &Tensor<T>, grid: &PatchGrid) -> Result<ImplicitPosition> {
    if w.len() != grid.len() {
        return Err(DipError::shape(
            "implicit_position",
            format!("{} weights for a {}x{} grid", w.len(), grid.rows, grid.cols),
        ));
    }
    let (mut x, mut y) = (0.0, 0.0);
    for (idx, &wv) in w.data().iter().enumerate() {
        let (lx, ly) = grid.location(idx / grid.cols + 1, idx % grid.cols + 1);
        x += wv.as_f64() * lx;
        y += wv.as_f64() * ly;
    }
    Ok(ImplicitPosition { x, y })
}

/// Value-level batch form: `dips [B, M, D]`, `patches [B, N, D]` to
/// weights `[B, M, N]` and positions `[B, M, 2]`.
pub fn implicit_positions<T: Scalar>(
    dips: &Tensor<T>,
    patches: &Tensor<T>,
    grid: &PatchGrid,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ds, ps) = (dips.shape(), patches.shape());
    if ds.len() != 3 || ps.len() != 3 || ds[0] != ps[0] || ds[2] != ps[2] || ps[1] != grid.len() {
        return Err(DipError::shape("implicit_positions", format!("dips {ds:?} vs patches {ps:?}")));
    }
    let (b, m, n, d) = (ds[0], ds[1], ps[1], ds[2]);
    let mut weights = Vec::with_capacity(b * m * n);
    let mut positions = Vec::with_capacity(b * m * 2);
    for bi in 0..b {
        let feats = Tensor::new(&[n, d], patches.data()[bi * n * d..(bi + 1) * n * d].to_vec())?;
        for mi in 0..m {
            let at = (bi * m + mi) * d;
            let c = correlation(&dips.data()[at..at + d], &feats, eps)?;
            let w = position_weights(&c);
            let p = implicit_position(&w, grid)?;
            weights.extend_from_slice(w.data());
            positions.push(T::of(p.x));
            positions.push(T::of(p.y));
        }
    }
    Ok((Tensor::new(&[b, m, n], weights)?, Tensor::new(&[b, m, 2], positions)?))
}

/// Differentiable counterpart of [`implicit_positions`].
pub fn implicit_positions_graph<T: Scalar>(
    g: &Graph<T>,
    dips: Var,
    patches: Var,
    grid: &PatchGrid,
    eps: f64,
) -> Result<(Var, Var)> {
    let (ds, ps) = (g.shape(dips), g.shape(patches));
    if ds.len() != 3 || ps.len() != 3 || ds[0] != ps[0] || ds[2] != ps[2] || ps[1] != grid.len() {
        return Err(DipError::shape("implicit_positions", format!("dips {ds:?} vs patches {ps:?}")));
    }
    let (m, n) = (ds[1], ps[1]);
    // [B, M, N, D] views of both operands
    let f = g.repeat(patches, m);
    let f = g.permute(f, &[1, 0, 2, 3])?;
    let q = g.repeat(dips, n);
    let q = g.permute(q, &[1, 2, 0, 3])?;
    let diff = g.sub(q, f)?;
    let sq = g.square(diff);
    let dist = g.sum_last(sq)?;
    let dist = g.sqrt(dist);
    let dist = g.offset(dist, eps);
    let corr = g.pow(dist, -1.0);
    let weights = g.softmax(corr)?;
    let locations = g.constant(grid.locations());
    let positions = g.matmul(weights, locations)?;
    Ok((weights, positions))
}
