//! Cascaded residual density network for crowd counting.
//!
//! An encoder taps a feature pyramid from a single image; a cascade of
//! residual density modules refines a density map from the coarsest level to
//! input resolution, each level adding a residual to the bilinearly
//! upsampled estimate of the level below. Training combines a pixel-wise
//! Euclidean loss with a local count loss over sliding patches, after a
//! level-by-level pretraining stage.
//!
//! Everything runs on a small reverse-mode differentiation core
//! ([`tape`], [`ops`]) in double precision.

pub mod checkpoint;
pub mod cnet;
pub mod density;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod ops;
pub mod pnet;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Shape, Tensor};
