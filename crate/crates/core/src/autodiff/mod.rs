//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Each sample's forward pass records onto its own [`Graph`]; parameters are
//! pulled from a [`crate::params::ParamStore`] by name so gradients come back
//! keyed the same way.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_param_gradients, GradCheck, GradCheckReport};
pub use graph::{half_width, Gradients, Graph, Var, GATHER_ZERO};
pub use tensor::Tensor;

#[cfg(test)]
mod op_tests;
