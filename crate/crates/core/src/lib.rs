//! Thermal-conduction-inspired transformer for infrared small target
//! segmentation, with the numerical pieces it is built from.
//!
//! - [`autodiff`]: dense tensors with tape-based reverse-mode differentiation.
//! - [`pmde`]: explicit finite-difference pixel diffusion simulator.
//! - [`tcia`]: shift-stencil attention with horizontal and vertical axis attention.
//! - [`tcbm`]: residual boundary block with a fixed Laplace front end.
//! - [`network`]: encoder/decoder model, Dice losses, AdaGrad training, checkpoints.
//! - [`data`]: synthetic infrared scenes, morphology and image I/O.
//! - [`metrics`]: IoU, nIoU, Pd and Fa.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod params;
pub mod pmde;
pub mod tcbm;
pub mod tcia;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
