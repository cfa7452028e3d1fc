//! Shared MLP head mapping each DiP feature to `(p̂_x, p̂_y, w)`, all squashed into (0, 1).

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::INIT_STD;
use crate::error::{DipError, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outputs per DiP: two position coordinates and one weighting.
pub const HEAD_OUTPUTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub fc3_w: ParamId,
    pub fc3_b: ParamId,
}

impl HeadParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) -> Self {
        HeadParams {
            fc1_w: store.register("head.fc1_w", trunc_normal(&[dim, dim], INIT_STD, rng)),
            fc1_b: store.register("head.fc1_b", Tensor::zeros(&[dim])),
            fc2_w: store.register("head.fc2_w", trunc_normal(&[dim, dim], INIT_STD, rng)),
            fc2_b: store.register("head.fc2_b", Tensor::zeros(&[dim])),
            fc3_w: store.register("head.fc3_w", trunc_normal(&[dim, HEAD_OUTPUTS], INIT_STD, rng)),
            fc3_b: store.register("head.fc3_b", Tensor::zeros(&[HEAD_OUTPUTS])),
        }
    }
}

/// Differentiable predictions for `dips: [.., M, D]`, giving `[.., M, 3]`.
pub fn predict<T: Scalar>(g: &Graph<T>, vars: &[Var], params: &HeadParams, dips: Var) -> Result<Var> {
    let h = g.linear(dips, vars[params.fc1_w], vars[params.fc1_b])?;
    let h = g.gelu(h);
    let h = g.linear(h, vars[params.fc2_w], vars[params.fc2_b])?;
    let h = g.gelu(h);
    let h = g.linear(h, vars[params.fc3_w], vars[params.fc3_b])?;
    Ok(g.sigmoid(h))
}

/// Splits head output `[B, M, 3]` into positions `[B, M, 2]` and weightings `[B, M]`.
pub fn split_prediction<T: Scalar>(g: &Graph<T>, head: Var) -> Result<(Var, Var)> {
    let s = g.shape(head);
    if s.len() != 3 || s[2] != HEAD_OUTPUTS {
        return Err(DipError::shape("split_prediction", format!("head output {s:?}")));
    }
    let positions = g.slice(head, 2, 0, 2)?;
    let weights = g.slice(head, 2, 2, 1)?;
    let weights = g.reshape(weights, &[s[0], s[1]])?;
    Ok((positions, weights))
}

/// Per-DiP prediction read back from a head output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DipPrediction {
    pub position: (f64, f64),
    pub weight: f64,
}

/// Value-level view of `[M, 3]` (or one image of `[B, M, 3]`).
pub fn predictions<T: Scalar>(head: &[T]) -> Vec<DipPrediction> {
    head.chunks(HEAD_OUTPUTS)
        .map(|r| DipPrediction { position: (r[0].as_f64(), r[1].as_f64()), weight: r[2].as_f64() })
        .collect()
}
