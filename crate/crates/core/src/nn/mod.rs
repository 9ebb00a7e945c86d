//! Minimal tensors and reverse-mode differentiation for the denoiser.

pub mod fpenv;
mod graph;
pub mod io;
pub mod ops;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NllTerm, Var};
pub use ops::AttnLayout;
pub use params::{adam_step, Adam, AdamConfig, GradBuffer, ParamId, ParameterStore};
pub use tensor::{DType, Float, Tensor};

#[cfg(test)]
mod gradcheck;
