//! Minimal reverse-mode kernel: exactly the primitives the denoiser needs.

mod graph;
mod layers;
mod params;
mod tensor;

pub use graph::{softmax_rows, Graph, Var};
pub use layers::{Affine, GruCell};
pub use params::{ParamEntry, ParamId, ParameterStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
