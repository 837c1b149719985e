pub mod autograd;
pub mod backbone;
pub mod csa;
pub mod data;
pub mod error;
pub mod ffd;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mrm;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{DType, FeatureMap, Float, Tensor};
