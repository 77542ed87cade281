//! Core algorithms for attention-UNet deforestation segmentation.
//!
//! Everything here works on in-memory grids and needs only `alloc`; file
//! formats, manifests and the command line live in the `canopy` crate.
//! Disable the default `std` feature to build for `no_std` targets.
//!
//! The pipeline, end to end:
//!
//! 1. [`preprocess`] turns raw sensor bands into a normalized [`Sample`].
//! 2. [`model`] holds the attention-gated UNet and its hand-written backward pass.
//! 3. [`loss`] and [`metrics`] provide the BCE + Dice objective and pixel accuracy, F1, IoU.
//! 4. [`train`] runs mini-batch Adam over samples.
//! 5. [`refine`] turns per-image probability masks into one binary mask per query.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
mod gemm;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod preprocess;
pub mod raster;
pub mod refine;
pub mod sample;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use raster::{Image, Mask, RasterTile};
pub use sample::{Sample, SampleKey, Sensor};
