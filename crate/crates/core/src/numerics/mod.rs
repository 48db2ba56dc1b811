//! Dense tensors, reverse-mode differentiation, Adam, checkpoints and seeded streams.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{central_difference, finite_difference_check, relative_error};
pub use params::ParamStore;
pub use rng::SeedStream;
pub use tape::{Bindings, Gradients, MixMatrix, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value at node {node} ({op})")]
    NumericalFailure { node: usize, op: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
