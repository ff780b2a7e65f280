//! Pipeline driver behind the `mvps` binary.

pub mod config;
pub mod train;
pub mod pipeline;
