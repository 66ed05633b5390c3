//! Minimal reverse-mode engine for fully-connected networks.

mod adam;
mod gemm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{argmax, log_softmax_slice, softmax_slice, Tensor};
