//! File formats and the command-line pipeline around [`canopy_core`].
//!
//! - [`dataset`]: manifests, sample loading and train/validation splits
//! - [`raster_io`]: single-band TIFF reading and writing
//! - [`checkpoint`]: binary model checkpoints
//! - [`records`]: prediction record indexes and query lists
//! - [`report`]: Markdown and PNG summaries
//! - [`cli`]: the `canopy` subcommands

pub mod checkpoint;
pub mod cli;
pub mod dataset;
mod error;
pub mod raster_io;
pub mod records;
pub mod report;

pub use error::{CanopyError, Result};
