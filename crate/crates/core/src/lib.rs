//! Globally-controlled vessel tracking with rotation-equivariant, scale-invariant local
//! segmentation and neural signed-distance surface reconstruction.

pub mod controller;
pub mod error;
pub mod geom;
pub mod nn;
pub mod orientation;
pub mod phantom;
pub mod polar;
pub mod real;
pub mod sphere;
pub mod surface;
pub mod tracker;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;

/// World point or direction in mm.
pub type Vec3 = geom::Vector3<f64>;
pub type Vec3f = geom::Vector3<f32>;
pub type Mat3 = geom::Matrix3<f64>;
