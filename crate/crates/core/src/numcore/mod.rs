//! Dense tensors, a reverse-mode tape, Adam and the warm-up schedule.

mod adam;
mod gradcheck;
pub mod kernels;
mod schedule;
mod tape;
mod tensor;

pub use adam::{Adam, AdamState};
pub use gradcheck::{check_gradients, GradMismatch, GradReport};
pub use schedule::WarmupSchedule;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index {index} out of range for {bound} rows")]
    Index { index: usize, bound: usize },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("learning rate must be finite and non-negative")]
    LearningRate,
}
