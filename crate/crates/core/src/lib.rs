//! Guided attentive interpolation (GAI): cross-resolution attention that
//! upsamples low-resolution semantic features under the guidance of
//! high-resolution features, plus the GAIN segmentation network built from
//! it, a deterministic training harness and an analytic cost model.

pub mod attention;
pub mod config;
pub mod cost;
pub mod error;
pub mod gradsuite;
pub mod net;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Rng, Tensor, Var};
