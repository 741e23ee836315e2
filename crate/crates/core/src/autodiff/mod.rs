//! Minimal reverse-mode automatic differentiation for the forecaster.

mod adam;
mod gradcheck;
mod graph;
mod mlp;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, softplus, Activation, Graph, NodeId};
pub use mlp::{mlp, Mlp};
pub use params::{glorot, Gradients, NamedTensor, ParamId, ParamStore};
pub use tensor::Tensor;
