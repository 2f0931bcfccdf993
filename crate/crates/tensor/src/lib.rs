//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The building blocks for the dual-branch quality network: CHW feature
//! maps, an eager operation tape with vector-Jacobian backward rules, and a
//! finite-difference gradient checker. No GPU, no dynamic graphs beyond what
//! the model needs.

mod conv;
mod error;
pub mod gradcheck;
mod reduce;
mod scalar;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{
    analytic_gradient, compare_gradients, grad_check, numeric_gradient, GradCheckReport,
};
pub use scalar::{sigmoid, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
