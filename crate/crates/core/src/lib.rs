//! Mask-conditioned diffusion synthesis of lymph-node CT patches, with the
//! surrounding data preparation, segmentation and evaluation machinery.
//!
//! Volumes are `[a0, a1, a2]` grids with `a2` contiguous. Diffusion
//! timesteps run `1..=T`.

// `!(x > 0.0)` style checks are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod components;
pub mod conditions;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod manifest;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod schedule;
pub mod seg;
pub mod volume;

pub use error::{Error, Result};
