//! Windowed-attention super-resolution for multispectral rasters, with
//! sparse mixture-of-experts feed-forward layers and explicit backward passes.

pub mod attention;
pub mod data;
pub mod error;
mod fsutil;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod scalar;

pub use error::{MoseError, Result};
pub use fsutil::write_atomic;
pub use scalar::{DType, Scalar};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
