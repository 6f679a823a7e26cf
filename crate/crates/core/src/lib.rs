#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autograd;
pub mod block;
pub mod config;
pub mod datagen;
pub mod error;
pub mod hosts;
mod linalg;
pub mod metrics;
pub mod rng;
pub mod saliency;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{CheckpointError, Error, Result};
pub use tensor::Tensor;
