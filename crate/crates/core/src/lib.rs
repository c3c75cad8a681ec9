//! LiDAR single-object tracking built on selective state-space scans and a
//! memory bank of past frames.
//!
//! The pipeline per frame: crop a search region around the previous box,
//! tokenize it ([`pointops`]), propagate features from the memory bank
//! ([`memory`], [`gfem`], [`mip`]), refine with bidirectional scans
//! ([`ssm`]), and regress the new box ([`localize`]). [`tracker`] drives the
//! loop, [`evalbench`] scores it.

pub mod config;
pub mod error;
pub mod evalbench;
pub mod flops;
pub mod formats;
pub mod geometry;
pub mod gfem;
pub mod localize;
pub mod memory;
pub mod mip;
pub mod nn;
pub mod oracles;
pub mod pointops;
pub mod selfcheck;
pub mod ssm;
pub mod synthgen;
pub mod tracker;
pub mod train;
pub mod weights;

pub use config::Config;
pub use error::{Error, Result};
pub use geometry::{Box7, BoxDelta, Point3};
pub use nn::FeatureMatrix;
pub use pointops::Cloud;
