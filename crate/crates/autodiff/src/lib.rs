//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The engine is deliberately small: a [`Tensor`] is a row-major matrix, a
//! [`Graph`] is a tape of operations, and [`ParamStore`] owns the learnable
//! state that graphs borrow. [`gradcheck`] provides central finite-difference
//! checks used throughout the test suites.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, softplus, Backward, Graph, Var, GATHER_ZERO};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
