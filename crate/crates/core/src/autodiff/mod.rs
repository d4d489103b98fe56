//! Differentiable computation substrate: dense f64 tensors, a Wengert tape
//! for reverse-mode gradients, and the loss primitives used by both training
//! stages. Single-threaded per tape; tensors are plain values.

pub mod gradcheck;
mod losses;
mod tape;
mod tensor;

pub use losses::{cross_entropy, focal_loss, gaussian_kl, l1_waypoints, LOG_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Faults surfaced by the reverse sweep.
#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("objective must be scalar, got shape {shape:?}")]
    NonScalarObjective { shape: Vec<usize> },
    #[error("non-finite value produced by op #{index} ({name})")]
    NonFinite { index: usize, name: &'static str },
}
