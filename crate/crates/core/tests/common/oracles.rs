//! Independent reference implementations: plain loops over nested vectors,
//! sharing no code with the library.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One image as `M` parts of width `D` plus `M` weightings.
#[derive(Clone, Debug)]
pub struct Parts {
    pub dips: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Parts {
    pub fn random(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Parts {
        Parts {
            dips: (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            weights: (0..m).map(|_| rng.random_range(0.0..2.0)).collect(),
        }
    }

    pub fn to_set<T: dip_core::Scalar>(&self) -> dip_core::losses::DiPSet<T> {
        let (m, d) = (self.dips.len(), self.dips[0].len());
        let flat = self.dips.iter().flatten().map(|&v| T::of(v)).collect();
        let dips = dip_core::Tensor::new(&[m, d], flat).unwrap();
        dip_core::losses::DiPSet::new(dips, self.weights.iter().map(|&w| T::of(w)).collect()).unwrap()
    }
}

/// Softmax of the products of weightings, then the weighted sum of per-part
/// Euclidean distances.
pub fn part_distance(a: &Parts, b: &Parts) -> f64 {
    let products: Vec<f64> = (0..a.weights.len()).map(|m| a.weights[m] * b.weights[m]).collect();
    let top = products.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = products.iter().map(|p| (p - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut total = 0.0;
    for m in 0..a.dips.len() {
        let mut sq = 0.0;
        for k in 0..a.dips[m].len() {
            sq += (a.dips[m][k] - b.dips[m][k]).powi(2);
        }
        total += exps[m] / z * sq.sqrt();
    }
    total
}

/// Whether the camera filter keeps a gallery entry for this query.
fn kept(q_label: usize, q_cam: usize, g_label: usize, g_cam: usize, filter: bool) -> bool {
    !(filter && q_label == g_label && q_cam == g_cam)
}

/// 1-based rank of gallery entry `g` among the kept entries, counting every
/// kept entry strictly closer or equally close with a smaller index.
fn rank_of(row: &[f64], keep: &[bool], g: usize) -> usize {
    1 + (0..row.len()).filter(|&o| keep[o] && (row[o] < row[g] || (row[o] == row[g] && o < g))).count()
}

/// Average precision by counting, without sorting the gallery.
pub fn average_precision(row: &[f64], q: (usize, usize), gallery: &[(usize, usize)], filter: bool) -> f64 {
    let keep: Vec<bool> = gallery.iter().map(|&(l, c)| kept(q.0, q.1, l, c, filter)).collect();
    let mut ranks: Vec<usize> =
        (0..row.len()).filter(|&g| keep[g] && gallery[g].0 == q.0).map(|g| rank_of(row, &keep, g)).collect();
    ranks.sort_unstable();
    let mut sum = 0.0;
    for (i, &r) in ranks.iter().enumerate() {
        sum += (i + 1) as f64 / r as f64;
    }
    sum / ranks.len() as f64
}

/// Rank of the first correct match.
pub fn first_hit(row: &[f64], q: (usize, usize), gallery: &[(usize, usize)], filter: bool) -> usize {
    let keep: Vec<bool> = gallery.iter().map(|&(l, c)| kept(q.0, q.1, l, c, filter)).collect();
    (0..row.len()).filter(|&g| keep[g] && gallery[g].0 == q.0).map(|g| rank_of(row, &keep, g)).min().unwrap()
}

/// Hardest `(positive, negative)` per anchor by scoring every pair; the
/// first pair in index order wins ties.
pub fn exhaustive_triplets(dist: &[Vec<f64>], labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let b = labels.len();
    (0..b)
        .map(|a| {
            let mut best: Option<(f64, usize, usize)> = None;
            for p in 0..b {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for n in 0..b {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    let score = dist[a][p] - dist[a][n];
                    if best.is_none_or(|(s, _, _)| score > s) {
                        best = Some((score, p, n));
                    }
                }
            }
            let (_, p, n) = best.expect("anchor has a positive and a negative");
            (a, p, n)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
