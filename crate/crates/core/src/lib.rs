//! Training, cross-validation and Grad-CAM explanation of a small
//! MobileNet-V3-style classifier for letter-reversal handwriting.

pub mod data;
pub mod explain;
pub mod nn;
pub mod raster;
mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = tensor::Graph<f32>;
pub type Model32 = nn::Model<f32>;
