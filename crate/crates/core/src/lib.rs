pub mod analysis;
pub mod clipping;
pub mod config;
pub mod data;
pub mod effective;
pub mod error;
pub mod meter;
pub mod metrics;
pub mod model;
pub mod moments;
pub mod optimizer;
pub mod privacy;
pub mod reattention;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
