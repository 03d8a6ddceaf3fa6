//! Minimal dense autodiff engine used by the encoder, denoiser and detector.

pub mod check;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamSpec, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
