//! Multi-view photometric stereo: geometry, synthetic data, the learned
//! feature and cost-regularisation networks, the cascaded plane sweep, depth
//! fusion and point-cloud evaluation.

mod error;

pub mod dataset;
pub mod fusion_eval;
pub mod geometry;
pub mod io;
pub mod network;
pub mod plane_sweep;
pub mod render;
pub mod spatial;

pub use error::{MvpsError, Result};
