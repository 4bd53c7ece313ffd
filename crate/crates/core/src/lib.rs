//! Visual-emotion regression head with spatial and channel-wise attention,
//! built on a minimal reverse-mode differentiation engine, plus everything
//! needed to train and evaluate it: a tiny convolutional backbone, dataset
//! handling with a synthetic generator, an SGD trainer with checkpointing,
//! regression metrics, and attention-map export.
//!
//! The numeric core is generic over the scalar type ([`Scalar`], implemented
//! for `f32` and `f64`); concrete aliases for both precisions live at the
//! crate root. Gradient checks always run in double precision.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod loss;
pub mod model;
pub mod num;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use num::Scalar;

/// Double-precision aliases (tests, gradient checks, default training).
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = graph::Graph<f64>;
pub type Model64 = model::Model<f64>;
pub type TrainState64 = train::TrainState<f64>;

/// Single-precision aliases (optional training precision).
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = graph::Graph<f32>;
pub type Model32 = model::Model<f32>;
pub type TrainState32 = train::TrainState<f32>;
