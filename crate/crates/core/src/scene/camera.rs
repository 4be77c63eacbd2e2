use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera. Camera space follows the x-right, y-down, z-forward
/// convention; pixel centers sit at half-integer coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vector3<f64>,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        position: Vector3<f64>,
        rotation: Matrix3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Camera {
            position,
            rotation,
            fov_y,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `position` looking at `target`. Falls back to another up
    /// vector when `up` is parallel to the viewing direction.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = target - position;
        let dist = forward.norm();
        if !(dist > 0.0) {
            return Err(Error::InvalidCamera("position coincides with target".into()));
        }
        let forward = forward / dist;
        let mut right = forward.cross(&up);
        if right.norm() < 1e-8 {
            right = forward.cross(&Vector3::y());
            if right.norm() < 1e-8 {
                right = forward.cross(&Vector3::x());
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let near = (dist * 0.01).max(1e-3);
        let far = dist * 100.0;
        Camera::new(position, rotation, fov_y, width, height, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        let orth = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !(orth <= 1e-6) {
            return Err(Error::InvalidCamera(format!("rotation not orthonormal (error {orth:e})")));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidCamera(format!("fov {} outside (0, pi)", self.fov_y)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far (near {}, far {})",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite position".into()));
        }
        Ok(())
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.position)
    }

    /// Pixel coordinates of a world point, `None` if at or behind the near plane.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let c = self.world_to_camera(p);
        if c.z <= self.near {
            return None;
        }
        let f = self.focal();
        let pp = self.principal_point();
        Some(Vector2::new(f * c.x / c.z + pp.x, f * c.y / c.z + pp.y))
    }

    /// Unit world-space direction of the ray through a pixel coordinate.
    pub fn ray_direction(&self, px: f64, py: f64) -> Vector3<f64> {
        let f = self.focal();
        let pp = self.principal_point();
        let d_cam = Vector3::new((px - pp.x) / f, (py - pp.y) / f, 1.0);
        (self.rotation.transpose() * d_cam).normalize()
    }

    /// Same camera at a different resolution (keeps the vertical fov).
    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Camera {
            width,
            height,
            ..self.clone()
        }
    }
}
