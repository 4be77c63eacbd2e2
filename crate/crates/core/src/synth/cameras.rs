//! Camera rigs for training (spherical Fibonacci) and testing (spiral).

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::Camera;

/// Test-view count of the reference spiral.
pub const DEFAULT_SPIRAL_VIEWS: usize = 181;
/// Default elevation band of the spiral, radians.
pub const DEFAULT_ELEVATION_BAND: [f64; 2] = [-PI / 6.0, PI / 3.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

/// `z_i = 1 − (2i+1)/n`, azimuth `2πi(1 − 1/φ)` with `φ` the golden ratio.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * PI * i as f64 * (1.0 - 1.0 / golden);
            Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
        })
        .collect()
}

fn rotate_z(v: Vector3<f64>, angle: f64) -> Vector3<f64> {
    let (s, c) = angle.sin_cos();
    Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Cameras on a sphere around `center`, all looking at it with `+z` up.
/// `azimuth` rotates the whole rig about the z axis.
pub fn fibonacci_cameras(
    n: usize,
    radius: f64,
    center: Vector3<f64>,
    azimuth: f64,
    intr: Intrinsics,
) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one camera".into()));
    }
    fibonacci_sphere(n)
        .into_iter()
        .map(|d| {
            let pos = center + rotate_z(d, azimuth) * radius;
            Camera::look_at(pos, center, Vector3::z(), intr.fov_y, intr.width, intr.height)
        })
        .collect()
}

/// Azimuth and elevation of each spiral view. Elevation goes linearly over
/// `band`, azimuth over `turns · 2π`.
pub fn spiral_angles(n: usize, turns: f64, band: [f64; 2]) -> Result<Vec<(f64, f64)>> {
    if n < 2 {
        return Err(Error::InvalidArgument("a spiral needs at least two views".into()));
    }
    Ok((0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            (turns * 2.0 * PI * s, band[0] + (band[1] - band[0]) * s)
        })
        .collect())
}

pub fn spiral_test_cameras(
    n: usize,
    radius: f64,
    center: Vector3<f64>,
    turns: f64,
    band: [f64; 2],
    azimuth: f64,
    intr: Intrinsics,
) -> Result<Vec<Camera>> {
    spiral_angles(n, turns, band)?
        .into_iter()
        .map(|(az, el)| {
            let a = az + azimuth;
            let d = Vector3::new(el.cos() * a.cos(), el.cos() * a.sin(), el.sin());
            Camera::look_at(center + d * radius, center, Vector3::z(), intr.fov_y, intr.width, intr.height)
        })
        .collect()
}
