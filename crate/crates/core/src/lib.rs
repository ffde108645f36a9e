//! Pose refinement with LiDAR priors and normal-regularised Gaussian splatting.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod lie;
pub mod losses;
pub mod optim;
pub mod posegraph;
pub mod raster;
pub mod splat;
pub mod synth;
pub mod traj;

pub use error::{Error, Result};
pub use lie::{Rotation, SE3Pose};
pub use raster::Image;
