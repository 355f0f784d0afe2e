pub mod anchors;
pub mod data;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod scalar;
pub mod selftest;
pub mod tensor;

pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type PoseNet32 = network::PoseNet<f32>;
pub type PoseNet64 = network::PoseNet<f64>;
