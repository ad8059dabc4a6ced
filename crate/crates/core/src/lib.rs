//! Articulated-object reconstruction from two Gaussian-field observations.

pub mod articulation;
pub mod error;
pub mod fusion;
pub mod gaussian;
pub mod hungarian;
pub mod io;
pub mod math;
pub mod metrics;
pub mod part_field;
pub mod pipeline;
pub mod render;
pub mod repel;
pub mod spatial;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
