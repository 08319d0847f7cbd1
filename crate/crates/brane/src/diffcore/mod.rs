//! Minimal reverse-mode automatic differentiation over a flat parameter
//! vector.
//!
//! [`ParamStore`] holds every parameter in one `f64` vector, laid out so that
//! all blocks of layer `l..=L` form one contiguous suffix; gradient slices
//! for "the weights from layer `l` up" are plain subslices. [`Tape`] records
//! matrix-valued primitive operations during a forward pass and replays them
//! in reverse to accumulate gradients. Reductions run in a fixed
//! left-to-right order, so identical inputs produce bit-identical values and
//! gradients.

mod adam;
mod checkpoint;
mod fd;
mod params;
mod tape;

pub use adam::Adam;
pub use fd::fd_gradient;
pub use params::{BlockId, BlockSpec, ParamStore, ParamStoreBuilder};
pub use tape::{forward_scalar, grad_suffix, NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    /// Operand dimensions do not fit the operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Layer index outside `1..=num_layers`.
    #[error("layer index {given} outside 1..={max}")]
    BadLayerIndex { given: usize, max: usize },
    /// A scalar was required but the node is a matrix.
    #[error("node has shape {rows}x{cols}, expected 1x1")]
    NotAScalar { rows: usize, cols: usize },
    /// A checkpoint file failed to parse or verify.
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
