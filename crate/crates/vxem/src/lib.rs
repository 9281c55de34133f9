//! Adversarially trained fully-convolutional pipelines for volumetric
//! electron-microscopy restoration: slice interpolation, fine-scale
//! alignment, and 2× z super-resolution, built on a self-contained f64
//! tensor/autodiff engine.
//!
//! The crate also ships a seeded phantom-volume generator that provides
//! exact ground truth (per-slice offsets, removed slices) so restoration
//! quality can be measured instead of eyeballed.

pub mod ckpt;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nets;
pub mod optim;
#[cfg(feature = "testsupport")]
pub mod oracles;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod volume;

pub use error::{Result, VxError};
pub use graph::{Graph, NodeId};
pub use tensor::{ParamSet, Tensor};
