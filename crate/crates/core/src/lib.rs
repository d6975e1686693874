//! Diagonal state-space language models with manifold-constrained
//! multi-stream residual mixing and stream-specialized adapters.

pub mod adapters;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod float;
pub mod graph;
pub mod kernels;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod params;
pub mod selftest;
pub mod ssm;
pub mod streams;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use float::{DType, Float};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
