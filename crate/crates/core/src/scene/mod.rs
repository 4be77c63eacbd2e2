//! Canonical Gaussian representation: attribute storage, covariance
//! construction, cameras and spherical-harmonics color.

pub mod camera;
pub mod covariance;
pub mod gaussian;
pub mod sh;

pub use camera::Camera;
pub use covariance::{covariance, gaussian_value};
pub use gaussian::{logit, sigmoid, Aabb, Gaussian, GaussianSet};
