//! Two-branch surface-material classifier: handcrafted tactile features into
//! a single-layer transformer encoder, a compact convolutional vision branch,
//! and learnable softmax-weighted late fusion, with training, evaluation, and
//! latency benchmarking on top of a small reverse-mode autodiff engine.

pub mod bench;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod features;
pub mod rng;
pub mod train;
pub mod tensor;

pub use tensor::{Dtype, ParamId, ParamStore, Parameter, Scalar, Tape, Tensor, TensorError, ValueId};
