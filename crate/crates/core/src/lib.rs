//! Iterative multi-output segmentation networks: tensors, unrolled graphs,
//! cost accounting, training, architecture search and a deployment model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod builder;
pub mod config;
pub mod cost;
pub mod graph;
pub mod ntf;
pub mod report;
pub mod scalar;
pub mod search;
pub mod sim;
pub mod tensor;
pub mod train;

pub use builder::{build_itnet, HyperParams};
pub use cost::CostReport;
pub use graph::CompGraph;
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = builder::ParamStore<f32>;
pub type ParamStore64 = builder::ParamStore<f64>;
pub type GradTape32 = tensor::GradTape<f32>;
pub type GradTape64 = tensor::GradTape<f64>;
