//! Meshfree Stokes flow in an obstructed duct coupled to exterior acoustics,
//! and the two-stage inversion that recovers the obstruction from wave and
//! wall-velocity measurements.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod inverse_boundary;
pub mod inverse_obstacle;
pub mod kernels;
pub mod linalg;
pub mod series;
pub mod stokes;
pub mod wave;

pub use error::{Error, Result};
