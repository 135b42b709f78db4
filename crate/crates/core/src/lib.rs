//! Desk-scale toolkit for high-cardinality imbalanced text
//! classification: dense tensor math with reverse-mode gradients, a
//! small trainable transformer encoder with hybrid pooling and a
//! multi-sample dropout head, label-smoothed training under AdamW with
//! layer-wise learning-rate decay, and a top-K re-ranking pipeline.
//!
//! All numeric code is generic over the [`scalar::Scalar`] type
//! (`f32`/`f64`); the aliases below pin the widths used in practice.

pub mod batching;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod model;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod pooling;
pub mod rerank;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngState;
pub use scalar::Scalar;

/// Concrete aliases for the two supported scalar widths. Training and
/// the CLI run in `f64`; checkpoints store `f32`.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = graph::Graph<f64>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
