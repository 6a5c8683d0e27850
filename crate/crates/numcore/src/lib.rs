//! Minimal dense-tensor substrate: reverse-mode differentiation over 2-D
//! tensors, central-difference gradient checking, Adam, and parameter
//! checkpoints.
//!
//! ```
//! use numcore::{Graph, ParamStore, Tensor};
//!
//! let mut params = ParamStore::new();
//! let x = params.add("x", Tensor::scalar(3.0)).unwrap();
//! let mut g = Graph::new(&params);
//! let v = g.param(x);
//! let y = g.mul(v, v).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var, LOG_FLOOR};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Scalar type of every tensor. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(xs: &[Real]) -> Real {
    graph::logsumexp(xs)
}

/// In-place softmax of one row.
pub fn softmax(xs: &mut [Real]) {
    graph::softmax_in_place(xs)
}

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
