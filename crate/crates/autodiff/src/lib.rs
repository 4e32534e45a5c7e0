//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Values are `f64` throughout. Forward ops record onto a [`Graph`] tape;
//! [`Graph::backward`] replays it in reverse. Model code owns its weights
//! as [`Parameter`]s and records them with [`Graph::param`].

pub mod check;
mod error;
mod graph;
mod param;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{dropout_mask, log_sigmoid_scalar, sigmoid_scalar, AttentionSpec, Graph, Var};
pub use param::Parameter;
pub use tensor::Tensor;
