//! Projection-based random 2.5D U-net for sparse volumetric segmentation.
//!
//! Volumes are reduced to 2D by maximum intensity projection along many
//! in-plane directions, segmented by a single shared 2D U-net, and lifted
//! back to 3D by a learnable filtered backprojection followed by a small
//! fine-tuning head. Everything trainable runs on the reverse-mode
//! differentiation graph in [`autodiff`].
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. The `parallel` feature fans per-angle work out over rayon;
//! reductions keep a fixed order so results do not depend on it.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
