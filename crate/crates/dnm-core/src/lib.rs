//! Dual-network unsupervised stereo depth estimation, desk scale.
//!
//! Two small encoder-decoder CNNs (one per stereo view) are trained without
//! ground truth by warping each view into the other through predicted
//! disparity maps and penalizing photometric error, disparity roughness and
//! left-right inconsistency at four scales. The crate is `no_std` + `alloc`;
//! file formats and the CLI live in the companion `dnm-cli` crate.
//!
//! The layering, bottom up:
//!
//! * [`tensor`] / [`tape`] — dense `f64` tensors and tape-based reverse-mode
//!   automatic differentiation, with a finite-difference gradient checker.
//! * [`stereo`] — differentiable image operations: horizontal bilinear
//!   warping, windowed SSIM, forward-difference gradients, scale pyramids.
//! * [`loss`] — the six- and twelve-term objectives and their per-scale
//!   breakdowns.
//! * [`net`] — the miniature dual encoder-decoder producing four-scale
//!   disparity pyramids; [`checkpoint`] is its binary serialization.
//! * [`scene`] / [`train`] — synthetic rectified-stereo scenes with ground
//!   truth, augmentation, the learning-rate schedule, Adam, and the training
//!   loop.
//! * [`eval`] — disparity-to-depth conversion, flip-and-blend
//!   post-processing, and the standard depth metric suite.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod loss;
pub mod net;
pub mod rng;
pub mod scene;
pub mod stereo;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use tape::{Tape, TensorId, WarpDirection};
pub use tensor::Tensor;

/// Convenience alias used across the crate.
pub type Result<T> = core::result::Result<T, Error>;
