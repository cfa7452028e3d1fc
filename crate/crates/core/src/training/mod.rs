pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod sampler;
pub mod trainer;
