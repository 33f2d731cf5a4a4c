//! Dense arrays and the reverse-mode tape the detector is trained with.

mod fdcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use fdcheck::{finite_diff_check, FdReport, Probe};
pub use graph::{Broadcast, Gradients, Graph, Var};
pub use kernels::Padding;
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: input {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("{0}")]
    Invalid(String),
}
