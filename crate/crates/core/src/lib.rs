pub mod cli;
pub mod collectives;
pub mod config;
pub mod data;
pub mod distbn;
pub mod error;
pub mod nn;
pub mod optim;
pub mod perf;
pub mod precision;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
