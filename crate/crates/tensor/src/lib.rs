//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! The operation set is deliberately narrow: exactly what the recognizer's
//! encoder, counting heads, attention decoders and losses need, each with a
//! hand-written backward rule.

pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{softmax, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{gemm, Tensor};
