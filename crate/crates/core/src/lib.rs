pub mod ablation;
pub mod autograd;
pub mod config;
pub mod dip_head;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod implicit_position;
pub mod losses;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod visualize;

pub use error::{DipError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type DipModel32 = model::DipModel<f32>;
pub type DipModel64 = model::DipModel<f64>;

/// Caps the worker pool used for batch preparation and distance matrices.
/// Must run before any parallel work; later calls fail.
pub fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| DipError::Config(format!("thread pool: {e}")))
}
