//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Forward computations are recorded on a [`Tape`] as they execute. Calling
//! [`Tape::backward`] replays the record in reverse and hands back gradients
//! for every node, while [`Tape::backward_into`] accumulates the gradients of
//! parameter leaves into a [`ParamStore`]. Everything is `f64`.

mod gemm;
mod gradcheck;
mod gru;
mod init;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{central_difference, finite_diff_check, GradCheckReport};
pub use gru::{gru_cell, GruWeights};
pub use init::{uniform_fan_in, Linear};
pub use optim::{clip_grad_norm, RmsProp};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{softmax_scaled_rows, BoundParams, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NumericFault { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
