//! Coarse-to-fine video frame interpolation: a four-level pyramid network that
//! refines bidirectional flow, an occlusion mask and a residual at every
//! level, built on a small self-contained tensor engine with reverse-mode
//! autodiff.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Gradients, Real, Shape, Tape, Tensor};
