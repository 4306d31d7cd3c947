//! Tensors, reverse-mode graph, residual backbones with gated kernel
//! aggregation over a model zoo, training loops and cost accounting.

#![no_std]

extern crate alloc;

pub mod backbone;
pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::{DType, Real, Tensor};
