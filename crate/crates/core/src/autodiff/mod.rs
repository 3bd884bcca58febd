//! Reverse-mode differentiation on a per-step tape.

mod gradcheck;
mod graph;
mod params;
pub mod prob;
mod real;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var, LOG_FLOOR};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
