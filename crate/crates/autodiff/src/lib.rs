//! Deterministic reverse-mode automatic differentiation over dense `f64`
//! tensors, limited to the operators the sequence models need.
//!
//! A [`Graph`] is an eager tape: each operation computes its value
//! immediately and records a node. [`Graph::backward`] replays the nodes in
//! reverse. [`Graph::detach`] forwards its input unchanged and never passes a
//! gradient back.

mod error;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{ConvMode, Gradients, Graph, Mask, Var};
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

/// LayerNorm epsilon used throughout the models.
pub const LAYER_NORM_EPS: f64 = 1e-5;
