//! Dense tensors, reverse-mode gradients, seeded randomness and optimizers.

mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod prng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_per_param};
pub use optim::{cosine_lr, AdamHyper, AdamState, CosineSchedule};
pub use params::{ParamId, Params};
pub use prng::{derive_seed, Prng};
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} is not on the tape")]
    NotOnTape(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

impl TensorError {
    pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
