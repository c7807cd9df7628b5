//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Everything the toy transformer needs and nothing more: 2-D matrix
//! products, embedding lookup, row softmax with optional masking, layer
//! normalization, counter-based dropout and a cross-entropy loss that skips
//! an ignore sentinel. Tensors are generic over [`Real`] so the same graph
//! runs in `f32` for training and `f64` for gradient checking.

mod graph;
pub mod kernels;
mod tensor;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

pub use graph::{dropout_rng, FrozenLinear, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Floating point element type for tensors.
pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("target id {id} is outside the vocabulary of {vocab}")]
    TargetOutOfRange { id: i64, vocab: usize },
    #[error("embedding id {id} is outside a table of {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("dropout probability {0} outside [0, 1)")]
    DropoutProbability(f64),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
}

pub type Result<T, E = NumericsError> = core::result::Result<T, E>;
