//! Morphable-model face fitting with occlusion- and noise-robust
//! coefficient estimation.

pub mod degrade;
pub mod error;
pub mod eval;
pub mod grad;
pub mod io;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod render;

pub use error::{Error, Result};
