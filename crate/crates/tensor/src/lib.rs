//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! Covers exactly the operations the segmentation stack needs: matmul,
//! layer norm, softmax, conv2d, bilinear sampling, elementwise ops, a few
//! shape/gather utilities, and scalar losses. Graphs are built per forward
//! pass; `backward` runs one reverse sweep over the tape.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BinKind, Graph, NodeId};
pub use params::{is_frozen_name, Param, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
