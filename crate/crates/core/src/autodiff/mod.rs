//! Small reverse-mode differentiation engine: tensors, a per-pass tape,
//! named parameter storage, Adam and finite-difference gradient checks.

mod adam;
mod gradcheck;
mod graph;
mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions};
pub use graph::{Gradients, Graph, NodeId, ParamGrads, PrimitiveKind};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
