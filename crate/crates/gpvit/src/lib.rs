//! Group-propagation vision transformer, its cost model, and a verification
//! harness (gradient checks, invariant suites, synthetic overfit training,
//! group-map export).

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gp_block;
pub mod gradcheck;
pub mod imageio;
pub mod invariants;
pub mod model;
pub mod train;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{GradStore, Tensor};
