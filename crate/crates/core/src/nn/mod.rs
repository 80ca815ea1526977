//! Dense-network substrate: feedforward evaluation, reverse-mode gradients,
//! Adam, orthogonal initialization, Polyak averaging and checkpoints.
//!
//! Batches are row-major: one sample per row. Parameters are held as `f64`
//! in memory; checkpoints store them as little-endian `f32`.

mod adam;
mod checkpoint;
mod dense;
mod norm;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dense::{polyak_update, Activation, DenseNet, ForwardCache, Gradients, Layer};
pub use norm::{BatchNorm, BatchNormCache, BatchNormGrads};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("non-finite gradient in parameter group {0}")]
    NonFiniteGradient(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
