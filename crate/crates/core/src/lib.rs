//! Locally-consistent deformable convolution (LCDC) and feature-space motion.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`conv`]: dense tensors, bilinear sampling, 2D/3D convolution
//! - [`deform`]: deformable convolution, LCDC and the offset learners
//! - [`motion`]: motion fields from offset differences, energy maps and the
//!   optical-flow equivalence check
//! - [`autodiff`]: a reverse-mode graph over all of the above plus a
//!   finite-difference oracle
//! - [`network`], [`train`]: the toy spatio-temporal network and its training loop
//! - [`synthdata`], [`metrics`]: synthetic motion data and segmentation metrics

pub mod autodiff;
pub mod conv;
pub mod deform;
pub mod error;
pub mod metrics;
pub mod motion;
pub mod network;
pub mod rng;
pub mod suites;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use conv::{bilinear_sample, conv2d, conv3d, Conv3dSpec, KernelSpec};
pub use deform::{
    deform_input, deformable_conv2d, dense_offset_learner, expand_local_to_dense, lcdc_conv2d,
    offset_learner, DenseOffsets, ExpandMode, LocalOffsets,
};
pub use error::{Error, Result};
pub use tensor::Tensor;
