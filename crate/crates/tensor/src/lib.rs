//! Dense tensors with a reverse-mode gradient tape.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar replays the record in reverse and
//! accumulates gradients into the leaves that asked for them. Parameters live
//! in a [`ParamStore`] and are bound into a graph through a [`Session`]; the
//! [`Adam`] optimizer consumes the accumulated gradients and zeroes them.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference checks.

pub mod fault;
mod graph;
pub mod numeric;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use graph::{Conv2dGeometry, Graph, OpKind, Var};
pub use optim::{Adam, AdamConfig};
pub use param::{Param, ParamId, ParamStore, Session};
pub use scalar::Scalar;
pub use tensor::{BitPattern, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
