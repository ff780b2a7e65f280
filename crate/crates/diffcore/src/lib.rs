//! A small reverse-mode differentiable tensor engine.
//!
//! Tensors are plain row-major buffers. Differentiable computation is
//! recorded on a [`Tape`]: every op appends a node holding its output value
//! and whatever forward context its backward rule needs, and
//! [`Tape::backward`] walks the nodes in reverse creation order.
//!
//! The engine is generic over the element type so that gradient checks can
//! run the exact same code paths in `f64`; production code uses `f32`.
//!
//! Only the operations needed by the multi-view photometric stereo pipeline
//! are provided.

mod conv;
mod error;
mod loss;
mod norm;
mod pointwise;
mod reduce;
mod sample;
mod scalar;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;

pub use error::{DiffError, Result};
pub use norm::BatchStats;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
