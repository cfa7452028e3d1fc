//! Random small problems for checking loss and implicit-position gradients.

use dip_core::autograd::{grad_check, Graph, ScalarFunction, Var};
use dip_core::encoder::EncoderOutput;
use dip_core::implicit_position::{implicit_positions_graph, PatchGrid, CORRELATION_EPS};
use dip_core::losses::{id_loss, part_distance_matrix, pe_loss, total_loss, triplet_loss, Branch, LossConfig};
use dip_core::model::ModelOutput;
use dip_core::{Result, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: u64 = 20;
const STEP: f64 = 1e-3;
const MINING_GAP: f64 = 2e-2;
const MIN_DIP_PATCH: f64 = 0.25;
const MIN_DISTANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Term {
    Id,
    Triplet,
    Pe,
    Total,
    Position,
}

/// Random small problem. The checked input packs parts `[B, M, D]` followed by
/// weights `[B, M]`; for `Position` it packs dips `[B, M, D]` and patches `[B, N, D]`.
struct Case {
    term: Term,
    b: usize,
    m: usize,
    d: usize,
    grid: PatchGrid,
    labels: Vec<usize>,
    classifier: Tensor<f64>,
    bias: Tensor<f64>,
    readout: Tensor<f64>,
    targets: Tensor<f64>,
    targets_t: Tensor<f64>,
    coef: Tensor<f64>,
    coef_w: Tensor<f64>,
    margin: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

impl Case {
    fn new(term: Term, seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = rng.random_range(2..4usize);
        let k = 2;
        let b = ids * k;
        let m = rng.random_range(1..4usize);
        let d = rng.random_range(2..5usize);
        let grid = PatchGrid::new(rng.random_range(2..4), rng.random_range(2..4));
        let classes = ids + 1;
        Case {
            term,
            b,
            m,
            d,
            grid,
            labels: (0..b).map(|i| i / k).collect(),
            classifier: uniform(&mut rng, &[d, classes], -1.0, 1.0),
            bias: uniform(&mut rng, &[classes], -0.5, 0.5),
            readout: uniform(&mut rng, &[d, 2], -1.0, 1.0),
            targets: uniform(&mut rng, &[b, m, 2], 0.0, 1.0),
            targets_t: uniform(&mut rng, &[b, m, 2], 0.0, 1.0),
            coef: uniform(&mut rng, &[b, m, 2], -1.0, 1.0),
            coef_w: uniform(&mut rng, &[b, m, grid.len()], -1.0, 1.0),
            // keeps every hinge active, away from the kink
            margin: rng.random_range(8.0..10.0),
        }
    }

    fn input_len(&self) -> usize {
        match self.term {
            Term::Position => self.b * (self.m + self.grid.len()) * self.d,
            _ => self.b * self.m * self.d + self.b * self.m,
        }
    }

    /// Features in `[-1, 1]`, weightings in the open range a sigmoid produces.
    /// Points where a finite-difference step could flip the mined pairs, or
    /// where a DiP sits on top of a patch, are redrawn.
    fn point(&self, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        loop {
            let p = match self.term {
                Term::Position => uniform(&mut rng, &[self.input_len()], -1.0, 1.0),
                _ => {
                    let mut v = uniform(&mut rng, &[self.b * self.m * self.d], -1.0, 1.0).data().to_vec();
                    v.extend(uniform(&mut rng, &[self.b * self.m], 0.05, 0.95).data());
                    Tensor::new(&[self.input_len()], v).unwrap()
                }
            };
            if self.well_posed(&p) {
                return p;
            }
        }
    }

    fn well_posed(&self, p: &Tensor<f64>) -> bool {
        match self.term {
            Term::Triplet | Term::Total => self.mining_gap(p) > MINING_GAP,
            Term::Position => {
                let (b, m, n, d) = (self.b, self.m, self.grid.len(), self.d);
                let (dips, patches) = p.data().split_at(b * m * d);
                (0..b).all(|i| {
                    (0..m).all(|k| {
                        (0..n).all(|j| {
                            let a = &dips[(i * m + k) * d..(i * m + k + 1) * d];
                            let c = &patches[(i * n + j) * d..(i * n + j + 1) * d];
                            a.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() > MIN_DIP_PATCH
                        })
                    })
                })
            }
            _ => true,
        }
    }

    /// Smallest gap between a mined pair and the runner-up candidate; zero if
    /// two images nearly coincide.
    fn mining_gap(&self, p: &Tensor<f64>) -> f64 {
        let g = Graph::<f64>::new();
        let x = g.constant(p.clone());
        let (parts, weights) = self.split(&g, x).unwrap();
        let (parts, weights, labels) = if self.term == Term::Total {
            let parts_t = g.offset(g.scale(parts, 0.8), 0.1);
            let weights_t = g.scale(weights, 1.3);
            let mut labels = self.labels.clone();
            labels.extend_from_slice(&self.labels);
            (g.concat(&[parts, parts_t], 0).unwrap(), g.concat(&[weights, weights_t], 0).unwrap(), labels)
        } else {
            (parts, weights, self.labels.clone())
        };
        let dist = g.value(part_distance_matrix(&g, parts, weights).unwrap());
        let n = labels.len();
        let mut gap = f64::INFINITY;
        for a in 0..n {
            let row = &dist.data()[a * n..(a + 1) * n];
            // the norm's curvature blows up near zero distance
            if (0..n).any(|j| j != a && row[j] < MIN_DISTANCE) {
                return 0.0;
            }
            let mut pos: Vec<f64> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).map(|j| row[j]).collect();
            let mut neg: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[a]).map(|j| row[j]).collect();
            pos.sort_by(|x, y| y.total_cmp(x));
            neg.sort_by(f64::total_cmp);
            for v in [&pos, &neg] {
                if v.len() > 1 {
                    gap = gap.min((v[0] - v[1]).abs());
                }
            }
        }
        gap
    }

    fn constant<T: dip_core::Scalar>(&self, g: &Graph<T>, t: &Tensor<f64>) -> Var {
        g.constant(t.cast::<T>())
    }

    fn split<T: dip_core::Scalar>(&self, g: &Graph<T>, x: Var) -> Result<(Var, Var)> {
        let (b, m, d) = (self.b, self.m, self.d);
        let parts = g.reshape(g.slice(x, 0, 0, b * m * d)?, &[b, m, d])?;
        let weights = g.reshape(g.slice(x, 0, b * m * d, b * m)?, &[b, m])?;
        Ok((parts, weights))
    }

    fn logits<T: dip_core::Scalar>(&self, g: &Graph<T>, parts: Var, weights: Var) -> Result<(Var, Var)> {
        let w = g.reshape(weights, &[self.b, 1, self.m])?;
        let feature = g.reshape(g.matmul(w, parts)?, &[self.b, self.d])?;
        let logits = g.linear(feature, self.constant(g, &self.classifier), self.constant(g, &self.bias))?;
        Ok((feature, logits))
    }

    fn predictions<T: dip_core::Scalar>(&self, g: &Graph<T>, parts: Var) -> Result<Var> {
        Ok(g.sigmoid(g.matmul(parts, self.constant(g, &self.readout))?))
    }

    fn output<T: dip_core::Scalar>(&self, g: &Graph<T>, parts: Var, weights: Var) -> Result<ModelOutput> {
        let (feature, logits) = self.logits(g, parts, weights)?;
        let positions = self.predictions(g, parts)?;
        let dummy = g.constant(Tensor::zeros(&[self.b, self.d]));
        Ok(ModelOutput {
            encoder: EncoderOutput { cls: dummy, patches: dummy, dips: Some(parts), sequence: dummy },
            head: None,
            positions: Some(positions),
            parts,
            weights,
            feature,
            logits,
        })
    }
}

impl ScalarFunction for Case {
    fn eval<T: dip_core::Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        match self.term {
            Term::Id => {
                let (parts, weights) = self.split(g, x)?;
                let (_, logits) = self.logits(g, parts, weights)?;
                id_loss(g, logits, &self.labels)
            }
            Term::Triplet => {
                let (parts, weights) = self.split(g, x)?;
                let dist = part_distance_matrix(g, parts, weights)?;
                Ok(triplet_loss(g, dist, &self.labels, self.margin)?.0)
            }
            Term::Pe => {
                let (parts, _) = self.split(g, x)?;
                let preds = self.predictions(g, parts)?;
                pe_loss(g, self.constant(g, &self.targets), preds)
            }
            Term::Total => {
                let (parts, weights) = self.split(g, x)?;
                let original = self.output(g, parts, weights)?;
                let parts_t = g.offset(g.scale(parts, 0.8), 0.1);
                let weights_t = g.scale(weights, 1.3);
                let transformed = self.output(g, parts_t, weights_t)?;
                let targets = self.targets.cast::<T>();
                let targets_t = self.targets_t.cast::<T>();
                let cfg = LossConfig { lambda_id: 0.7, lambda_t: 1.1, lambda_pe: 1.9, margin: self.margin };
                let (loss, _) = total_loss(
                    g,
                    &Branch { output: &original, targets: Some(&targets) },
                    Some(&Branch { output: &transformed, targets: Some(&targets_t) }),
                    &self.labels,
                    &cfg,
                )?;
                Ok(loss)
            }
            Term::Position => {
                let (b, m, n, d) = (self.b, self.m, self.grid.len(), self.d);
                let dips = g.reshape(g.slice(x, 0, 0, b * m * d)?, &[b, m, d])?;
                let patches = g.reshape(g.slice(x, 0, b * m * d, b * n * d)?, &[b, n, d])?;
                let (weights, positions) = implicit_positions_graph(g, dips, patches, &self.grid, CORRELATION_EPS)?;
                let a = g.sum(g.mul(positions, self.constant(g, &self.coef))?);
                let c = g.sum(g.mul(weights, self.constant(g, &self.coef_w))?);
                g.add(a, c)
            }
        }
    }
}

pub fn worst_error<T: dip_core::Scalar>(term: Term) -> f64 {
    (0..CONFIGS)
        .map(|seed| {
            let case = Case::new(term, seed);
            let point = case.point(seed).cast::<T>();
            grad_check(&case, &point, STEP).unwrap_or_else(|e| panic!("{term:?} config {seed}: {e}"))
        })
        .fold(0.0, f64::max)
}

pub fn check(term: Term) {
    let e64 = worst_error::<f64>(term);
    let e32 = worst_error::<f32>(term);
    assert!(e64 < 1e-5, "{term:?}: 64-bit error {e64:e}");
    assert!(e32 < 1e-3, "{term:?}: 32-bit error {e32:e}");
}
