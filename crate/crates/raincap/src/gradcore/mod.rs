//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it is applied; tensors are plain
//! indices ([`TensorId`]) into the graph's node list, so node parents always
//! precede the node and one [`Graph::backward`] call visits each node exactly
//! once in reverse construction order. Training runs in `f32`; the same code
//! instantiated at `f64` is used solely for finite-difference gradient checks
//! (see [`check`]).

mod graph;
mod ops;
mod optim;
mod params;
mod shape;

pub mod check;

pub use graph::{Graph, Node, Op, TensorId};
pub use optim::{adam_update, AdamConfig, OptimizerState};
pub use params::{Binding, ParamEntry, ParamId, ParamStore};
pub use shape::Shape;

use thiserror::Error;

/// Errors raised by graph construction, backward passes, and optimizer steps.
#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward target must be a scalar, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("missing gradient for parameter `{name}`")]
    MissingGrad { name: String },
    #[error("{op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Scalar element type of a graph: `f32` for training, `f64` for checking.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Element for f32 {}
impl Element for f64 {}

/// Converts an `f64` constant into the graph element type.
pub(crate) fn elem<T: Element>(v: f64) -> T {
    T::from_f64(v).expect("constant representable in element type")
}
