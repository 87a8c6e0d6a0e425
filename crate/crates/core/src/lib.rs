//! Differentiable spring–mass simulation and system identification from
//! point-cloud trajectories.

pub mod cli;
pub mod error;
pub mod fit;
pub mod geom;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod model;
pub mod scenegen;
pub mod sim;

pub use error::{Error, Result};
pub use geom::{PointCloud, Vec3};
