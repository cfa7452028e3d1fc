//! Every recorded primitive against central differences at 64-bit precision.

use dip_core::autograd::{grad_check, Graph, ScalarFunction, Var};
use dip_core::{Result, Scalar, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
enum Prim {
    MatMulLeft,
    MatMulRight,
    BatchedMatMul,
    Add,
    AddBroadcast,
    Sub,
    Mul,
    MulBroadcast,
    Scale,
    Pow3,
    Reciprocal,
    Sqrt,
    Sigmoid,
    Gelu,
    Relu,
    Softmax,
    LayerNorm,
    Reshape,
    Permute,
    Slice,
    Concat,
    Repeat,
    SumLast,
    MeanLast,
    Mean,
    Gather,
    CrossEntropy,
}

const ALL: [Prim; 27] = [
    Prim::MatMulLeft,
    Prim::MatMulRight,
    Prim::BatchedMatMul,
    Prim::Add,
    Prim::AddBroadcast,
    Prim::Sub,
    Prim::Mul,
    Prim::MulBroadcast,
    Prim::Scale,
    Prim::Pow3,
    Prim::Reciprocal,
    Prim::Sqrt,
    Prim::Sigmoid,
    Prim::Gelu,
    Prim::Relu,
    Prim::Softmax,
    Prim::LayerNorm,
    Prim::Reshape,
    Prim::Permute,
    Prim::Slice,
    Prim::Concat,
    Prim::Repeat,
    Prim::SumLast,
    Prim::MeanLast,
    Prim::Mean,
    Prim::Gather,
    Prim::CrossEntropy,
];

/// `sum(weights * prim(x, other))` with fixed random `other` and `weights`.
struct Case {
    prim: Prim,
    other: Tensor<f64>,
    weights: Vec<f64>,
}

impl Case {
    fn input_shape(prim: Prim) -> Vec<usize> {
        match prim {
            Prim::BatchedMatMul | Prim::Permute | Prim::Slice | Prim::Concat => vec![2, 3, 4],
            Prim::CrossEntropy => vec![3, 5],
            _ => vec![3, 4],
        }
    }

    fn other_shape(prim: Prim) -> Vec<usize> {
        match prim {
            Prim::MatMulLeft => vec![4, 2],
            Prim::MatMulRight => vec![5, 3],
            Prim::BatchedMatMul => vec![2, 4, 3],
            Prim::AddBroadcast | Prim::MulBroadcast => vec![4],
            Prim::Concat => vec![2, 2, 4],
            _ => vec![3, 4],
        }
    }

    fn new(prim: Prim, rng: &mut ChaCha8Rng) -> Case {
        let oshape = Self::other_shape(prim);
        let n: usize = oshape.iter().product();
        let other = Tensor::new(&oshape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let weights = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        Case { prim, other, weights }
    }

    fn point(&self, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let shape = Self::input_shape(self.prim);
        let n: usize = shape.iter().product();
        let positive = matches!(self.prim, Prim::Sqrt | Prim::Reciprocal);
        let data = (0..n)
            .map(|_| {
                if positive {
                    return rng.random_range(0.5..2.0);
                }
                let v: f64 = rng.random_range(-1.5..1.5);
                // keep relu samples off its kink
                if matches!(self.prim, Prim::Relu) && v.abs() < 0.05 { v.signum() * 0.05 + v } else { v }
            })
            .collect();
        Tensor::new(&shape, data).unwrap()
    }
}

impl ScalarFunction for Case {
    fn eval<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let o = g.constant(self.other.cast());
        let y = match self.prim {
            Prim::MatMulLeft => g.matmul(x, o)?,
            Prim::MatMulRight => g.matmul(o, x)?,
            Prim::BatchedMatMul => g.matmul(x, o)?,
            Prim::Add | Prim::AddBroadcast => g.add(x, o)?,
            Prim::Sub => {
                let a = g.sub(o, x)?;
                g.sub(a, x)?
            }
            Prim::Mul | Prim::MulBroadcast => g.mul(x, o)?,
            Prim::Scale => g.scale(x, -2.5),
            Prim::Pow3 => g.pow(x, 3.0),
            Prim::Reciprocal => g.pow(x, -1.0),
            Prim::Sqrt => g.sqrt(x),
            Prim::Sigmoid => g.sigmoid(x),
            Prim::Gelu => g.gelu(x),
            Prim::Relu => g.relu(x),
            Prim::Softmax => g.softmax(x)?,
            Prim::LayerNorm => g.layer_norm(x, 1e-5)?,
            Prim::Reshape => g.reshape(x, &[2, 6])?,
            Prim::Permute => g.permute(x, &[2, 0, 1])?,
            Prim::Slice => g.slice(x, 1, 1, 2)?,
            Prim::Concat => g.concat(&[o, x, o], 1)?,
            Prim::Repeat => g.repeat(x, 3),
            Prim::SumLast => g.sum_last(x)?,
            Prim::MeanLast => g.mean_last(x)?,
            Prim::Mean => g.mean(x),
            Prim::Gather => g.gather(x, vec![0, 5, 5, 11, 2])?,
            Prim::CrossEntropy => g.cross_entropy(x, &[1, 4, 0])?,
        };
        let n = g.value(y).len();
        let shape = g.shape(y);
        let w = g.constant(Tensor::new(&shape, self.weights[..n].iter().map(|&v| T::of(v)).collect())?);
        let weighted = g.mul(y, w)?;
        Ok(g.sum(weighted))
    }
}

#[test]
fn every_primitive_passes_grad_check_at_64_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    for prim in ALL {
        let case = Case::new(prim, &mut rng);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let p = case.point(&mut rng);
            worst = worst.max(grad_check(&case, &p, 1e-3).unwrap());
        }
        println!("{prim:?}: max relative error {worst:.3e}");
        assert!(worst < 1e-5, "{prim:?}: max relative error {worst:e}");
    }
}

#[test]
fn sum_of_product_gradient_is_b_transposed_structure() {
    // d/dA sum(A B) = 1 B^T: every row of the gradient equals the row sums of B.
    let g = Graph::<f64>::new();
    let a = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1));
    let b = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
    let y = g.matmul(a, b).unwrap();
    let s = g.sum(y);
    let grads = g.backward_scalar(s).unwrap();
    let ga = grads.get(a).unwrap();
    let bv = g.value(b).clone();
    for r in 0..2 {
        for k in 0..3 {
            let row_sum: f64 = (0..4).map(|j| bv.get(&[k, j])).sum();
            assert!((ga.get(&[r, k]) - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic_bytewise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let run = |rng: &mut ChaCha8Rng| {
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::from_fn(&[8, 16], |_| rng.random_range(-1.0f32..1.0)));
        let w = g.param(Tensor::from_fn(&[16, 16], |_| rng.random_range(-1.0f32..1.0)));
        let h = g.matmul(x, w).unwrap();
        let h = g.layer_norm(h, 1e-5).unwrap();
        let h = g.gelu(h);
        let s = g.softmax(h).unwrap();
        let out = g.value(s).clone();
        out.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()
    };
    let first = run(&mut rng.clone());
    let second = run(&mut rng);
    assert_eq!(first, second);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[5, 7], |_| rng.random_range(-30.0f32..30.0)));
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(7) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
