//! Minimal tensor container and reverse-mode differentiation for exactly
//! the operator set the network needs: grouped/pointwise/depthwise
//! convolutions, the vertical IIR recurrence, 4x4 max pooling, nearest
//! upsampling, elementwise merges, and a handful of loss helpers.
//!
//! Forward execution uses a fixed summation order (kernel row, kernel
//! column, in-channel) so results are bit-reproducible across runs, and so
//! the streaming engine can share the exact same per-row arithmetic.

mod grad_check;
pub mod ops;
mod tape;
mod tensor;

pub use grad_check::finite_diff_check;
pub use tape::{MergeKind, Tape, ValueId};
pub use tensor::{BoxConstraint, Parameter, Tensor};
