//! Training objectives: ID loss on the weighted part sum, the part-based
//! triplet loss with batch-hard mining, and position-equivariance losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{ops::softmax_rows, Graph, Var};
use crate::error::{DipError, Result};
use crate::model::ModelOutput;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_id: f64,
    pub lambda_t: f64,
    pub lambda_pe: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_id: 1.0, lambda_t: 1.0, lambda_pe: 1.0, margin: 0.3 }
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id_loss: f64,
    pub id_loss_transformed: f64,
    pub triplet_loss: f64,
    pub pe_loss: f64,
    pub pe_loss_transformed: f64,
    pub total: f64,
    pub lambda_id: f64,
    pub lambda_t: f64,
    pub lambda_pe: f64,
}

/// One image's parts and weightings.
#[derive(Clone, Debug, PartialEq)]
pub struct DiPSet<T> {
    /// `[M, D]`
    pub dips: Tensor<T>,
    /// `M` weightings.
    pub weights: Vec<T>,
}

impl<T: Scalar> DiPSet<T> {
    pub fn new(dips: Tensor<T>, weights: Vec<T>) -> Result<Self> {
        if dips.rank() != 2 || dips.shape()[0] != weights.len() {
            return Err(DipError::shape("DiPSet", format!("dips {:?} with {} weights", dips.shape(), weights.len())));
        }
        Ok(DiPSet { dips, weights })
    }

    pub fn parts(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dips.shape()[1]
    }
}

/// `sum_i w_i * dip_i` with raw weightings.
pub fn weighted_dip_feature<T: Scalar>(set: &DiPSet<T>) -> Vec<T> {
    let d = set.dim();
    let mut out = vec![T::zero(); d];
    for (row, &w) in set.dips.data().chunks(d).zip(&set.weights) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    out
}

/// Per-part Euclidean distances averaged with `softmax(w1 * w2)`.
pub fn part_distance<T: Scalar>(a: &DiPSet<T>, b: &DiPSet<T>) -> Result<T> {
    if a.dips.shape() != b.dips.shape() {
        return Err(DipError::shape("part_distance", format!("{:?} vs {:?}", a.dips.shape(), b.dips.shape())));
    }
    let d = a.dim();
    let combined: Vec<T> = a.weights.iter().zip(&b.weights).map(|(&x, &y)| x * y).collect();
    let wc = softmax_rows(&combined, combined.len());
    let dist = a
        .dips
        .data()
        .chunks(d)
        .zip(b.dips.data().chunks(d))
        .zip(&wc)
        .map(|((x, y), &w)| {
            let sq: T = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum();
            w * sq.sqrt()
        })
        .sum();
    Ok(dist)
}

/// Mean cross-entropy of `logits [B, classes]` against `labels`.
pub fn id_loss<T: Scalar>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Differentiable `[B, B]` part distances between all pairs of a batch.
pub fn part_distance_matrix<T: Scalar>(g: &Graph<T>, parts: Var, weights: Var) -> Result<Var> {
    let ps = g.shape(parts);
    let ws = g.shape(weights);
    if ps.len() != 3 || ws != ps[..2] {
        return Err(DipError::shape("part_distance_matrix", format!("parts {ps:?} with weights {ws:?}")));
    }
    let b = ps[0];
    // tiled[a, c] = parts[c]; swapped[a, c] = parts[a]
    let tiled = g.repeat(parts, b);
    let swapped = g.permute(tiled, &[1, 0, 2, 3])?;
    let diff = g.sub(swapped, tiled)?;
    let sq = g.square(diff);
    let d = g.sum_last(sq)?;
    let d = g.sqrt(d);
    let wt = g.repeat(weights, b);
    let ws = g.permute(wt, &[1, 0, 2])?;
    let wc = g.mul(ws, wt)?;
    let wc = g.softmax(wc)?;
    let weighted = g.mul(wc, d)?;
    g.sum_last(weighted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Farthest positive (other than the anchor) and nearest negative per anchor;
/// ties go to the lowest index.
pub fn mine_batch_hard<T: Scalar>(dist: &Tensor<T>, labels: &[usize]) -> Result<Vec<Triplet>> {
    let b = labels.len();
    if dist.shape() != [b, b] {
        return Err(DipError::shape("mine_batch_hard", format!("distances {:?} for {b} labels", dist.shape())));
    }
    (0..b)
        .map(|a| {
            let row = &dist.data()[a * b..(a + 1) * b];
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if labels[j] == labels[a] {
                    if j != a && pos.is_none_or(|p| v > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| v < row[n]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(positive), Some(negative)) => Ok(Triplet { anchor: a, positive, negative }),
                (None, _) => Err(DipError::DegenerateBatch { anchor: a, missing: "positive" }),
                (_, None) => Err(DipError::DegenerateBatch { anchor: a, missing: "negative" }),
            }
        })
        .collect()
}

/// Batch-hard hinge `mean(max(0, d_pos - d_neg + margin))` over a `[B, B]` distance matrix.
pub fn triplet_loss<T: Scalar>(g: &Graph<T>, dist: Var, labels: &[usize], margin: f64) -> Result<(Var, Vec<Triplet>)> {
    let triplets = mine_batch_hard(&g.value(dist), labels)?;
    let b = labels.len();
    let pos = g.gather(dist, triplets.iter().map(|t| t.anchor * b + t.positive).collect())?;
    let neg = g.gather(dist, triplets.iter().map(|t| t.anchor * b + t.negative).collect())?;
    let gap = g.sub(pos, neg)?;
    let hinge = g.relu(g.offset(gap, margin));
    Ok((g.mean(hinge), triplets))
}

/// Mean over images and DiPs of `||p - p̂||²` for `[B, M, 2]` tensors.
pub fn pe_loss<T: Scalar>(g: &Graph<T>, targets: Var, predictions: Var) -> Result<Var> {
    let (ts, ps) = (g.shape(targets), g.shape(predictions));
    if ts != ps || ts.last() != Some(&2) {
        return Err(DipError::shape("pe_loss", format!("targets {ts:?} vs predictions {ps:?}")));
    }
    let diff = g.sub(targets, predictions)?;
    let sq = g.square(diff);
    let per_dip = g.sum_last(sq)?;
    Ok(g.mean(per_dip))
}

/// One branch of a training step: model outputs plus detached position targets.
pub struct Branch<'a, T> {
    pub output: &'a ModelOutput,
    /// `[B, M, 2]`; ignored when the model has no DiP tokens.
    pub targets: Option<&'a Tensor<T>>,
}

/// `λ_id (id + id') + λ_T triplet(X ∪ X') + λ_PE (L_PE + L'_PE)`.
pub fn total_loss<T: Scalar>(
    g: &Graph<T>,
    original: &Branch<'_, T>,
    transformed: Option<&Branch<'_, T>>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let value = |v: Var| g.value(v).item().as_f64();
    let mut bd = LossBreakdown { lambda_id: cfg.lambda_id, lambda_t: cfg.lambda_t, lambda_pe: cfg.lambda_pe, ..Default::default() };

    let id = id_loss(g, original.output.logits, labels)?;
    bd.id_loss = value(id);
    let mut id_sum = id;

    let mut parts = original.output.parts;
    let mut weights = original.output.weights;
    let mut all_labels = labels.to_vec();
    if let Some(t) = transformed {
        let id_t = id_loss(g, t.output.logits, labels)?;
        bd.id_loss_transformed = value(id_t);
        id_sum = g.add(id_sum, id_t)?;
        parts = g.concat(&[parts, t.output.parts], 0)?;
        weights = g.concat(&[weights, t.output.weights], 0)?;
        all_labels.extend_from_slice(labels);
    }
    let dist = part_distance_matrix(g, parts, weights)?;
    let (triplet, _) = triplet_loss(g, dist, &all_labels, cfg.margin)?;
    bd.triplet_loss = value(triplet);

    let mut total = g.add(g.scale(id_sum, cfg.lambda_id), g.scale(triplet, cfg.lambda_t))?;

    let pe_term = |branch: &Branch<'_, T>| -> Result<Option<(Var, f64)>> {
        match (branch.output.positions, branch.targets) {
            (Some(pred), Some(target)) => {
                let target = g.constant(target.clone());
                let l = pe_loss(g, target, pred)?;
                Ok(Some((l, value(l))))
            }
            _ => Ok(None),
        }
    };
    let mut pe_sum: Option<Var> = None;
    if let Some((l, v)) = pe_term(original)? {
        bd.pe_loss = v;
        pe_sum = Some(l);
    }
    if let Some(t) = transformed {
        if let Some((l, v)) = pe_term(t)? {
            bd.pe_loss_transformed = v;
            pe_sum = Some(match pe_sum {
                Some(s) => g.add(s, l)?,
                None => l,
            });
        }
    }
    if let Some(pe) = pe_sum {
        total = g.add(total, g.scale(pe, cfg.lambda_pe))?;
    }
    bd.total = value(total);
    if !bd.total.is_finite() {
        return Err(DipError::NonFinite(format!("total loss {}", bd.total)));
    }
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(dips: &[f64], d: usize, w: &[f64]) -> DiPSet<f64> {
        DiPSet::new(Tensor::from_f64(&[w.len(), d], dips).unwrap(), w.to_vec()).unwrap()
    }

    #[test]
    fn weighted_feature_examples() {
        assert_eq!(weighted_dip_feature(&set(&[2.0, 4.0], 1, &[0.5, 0.5])), vec![3.0]);
        assert_eq!(weighted_dip_feature(&set(&[1.0, 2.0, 3.0, 4.0], 2, &[1.0, 1.0])), vec![4.0, 6.0]);
        assert_eq!(weighted_dip_feature(&set(&[1.0, 2.0, 3.0, 4.0], 2, &[0.0, 1.0])), vec![3.0, 4.0]);
    }

    #[test]
    fn id_loss_examples() {
        let g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[1, 4]));
        assert!((g.value(id_loss(&g, uniform, &[2]).unwrap()).item() - 4f64.ln()).abs() < 1e-12);
        let two = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let l = g.value(id_loss(&g, two, &[0]).unwrap()).item();
        assert!((l - 0.31326168751822286).abs() < 1e-12);
        let confident = g.constant(Tensor::from_f64(&[1, 2], &[60.0, 0.0]).unwrap());
        assert!(g.value(id_loss(&g, confident, &[0]).unwrap()).item() < 1e-20);
        assert!(matches!(id_loss(&g, uniform, &[4]), Err(DipError::LabelOutOfRange { label: 4, classes: 4 })));
    }

    #[test]
    fn part_distance_examples() {
        let a = set(&[0.0, 0.0], 1, &[0.0, 0.0]);
        let b = set(&[1.0, 3.0], 1, &[0.0, 0.0]);
        assert_eq!(part_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(part_distance(&b, &a).unwrap(), 2.0);
        let c = set(&[0.3, -1.0, 2.0, 0.5], 2, &[0.9, 0.1]);
        assert_eq!(part_distance(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn hinge_example() {
        let g = Graph::<f64>::new();
        let dist = g.constant(Tensor::from_f64(&[4, 4], &[
            0.0, 1.0, 0.5, 2.0, //
            1.0, 0.0, 2.0, 2.0, //
            0.5, 2.0, 0.0, 0.2, //
            2.0, 2.0, 0.2, 0.0,
        ]).unwrap());
        let (loss, triplets) = triplet_loss(&g, dist, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(triplets[0], Triplet { anchor: 0, positive: 1, negative: 2 });
        // only anchor 0 violates the margin: 1.0 - 0.5 + 0.3
        assert!((g.value(loss).item() - 0.8 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn separable_batch_has_zero_triplet_loss() {
        let g = Graph::<f64>::new();
        let parts = g.constant(Tensor::from_f64(&[4, 1, 1], &[0.0, 0.0, 5.0, 5.0]).unwrap());
        let weights = g.constant(Tensor::ones(&[4, 1]));
        let dist = part_distance_matrix(&g, parts, weights).unwrap();
        let (loss, _) = triplet_loss(&g, dist, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn degenerate_batch_is_an_error() {
        let dist = Tensor::<f64>::zeros(&[3, 3]);
        assert!(matches!(
            mine_batch_hard(&dist, &[0, 1, 1]),
            Err(DipError::DegenerateBatch { anchor: 0, missing: "positive" })
        ));
        assert!(matches!(
            mine_batch_hard(&Tensor::<f64>::zeros(&[2, 2]), &[1, 1]),
            Err(DipError::DegenerateBatch { anchor: 0, missing: "negative" })
        ));
    }

    #[test]
    fn pe_loss_examples() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[1, 1, 2], &[0.5, 0.6]).unwrap());
        let q = g.constant(Tensor::from_f64(&[1, 1, 2], &[0.2, 0.2]).unwrap());
        assert!((g.value(pe_loss(&g, p, q).unwrap()).item() - 0.25).abs() < 1e-12);
        assert_eq!(g.value(pe_loss(&g, p, p).unwrap()).item(), 0.0);
    }
}
