#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
mod clock;
pub mod config;
pub mod error;
pub mod geometry;
pub mod hull;
pub mod imaging;
pub mod optimizer;
pub mod pointcloud;
pub mod sync;
pub mod visibility;
pub mod voxel;

pub use error::{Error, Result};
