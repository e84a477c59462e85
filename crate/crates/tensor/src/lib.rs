//! Minimal reverse-mode autodiff over dense f64 tensors, plus the neural
//! building blocks (layers, initializers, optimizer, Gram collection) shared
//! by the perception crates.
//!
//! Design constraints that shaped this crate:
//! - deterministic: fixed iteration order everywhere, parallelism only over
//!   independent output elements, so repeated runs are bit-identical;
//! - eager: values are computed at node construction, which lets callers make
//!   data-dependent control-flow decisions (camera visibility, matching)
//!   mid-graph;
//! - verifiable: every op's backward is exercised against central finite
//!   differences in the test suite.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;

pub use array::Array;
pub use gradcheck::{assert_grad_close, finite_diff, max_rel_error};
pub use graph::{Grads, Graph, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("non-finite {what}: {value}")]
    NonFinite { what: String, value: f64 },
}
