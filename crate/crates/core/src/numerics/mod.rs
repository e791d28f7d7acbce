//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
pub mod rng;
mod scalar;
mod tensor;

pub use graph::{Graph, Reduction, Var, MASK_VALUE};
pub use optim::{adam_step, AdamConfig, AdamState, LrSchedule};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },
    #[error("no supervised positions: every target is padding")]
    NoSupervisedPositions,
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward already ran on this tape; rebuild the forward pass")]
    AlreadyBackpropagated,
    #[error("optimizer state covers {state} tensors but {params} were given")]
    StateMismatch { params: usize, state: usize },
}
