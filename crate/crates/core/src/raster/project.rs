//! EWA projection of 3D Gaussians to screen space and its derivative.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use super::RenderSettings;
use crate::scene::Camera;

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Camera-space mean.
    pub cam: Vector3<f64>,
    pub mean2d: [f64; 2],
    /// Upper triangle `(a, b, c)` of `[[a, b], [b, c]]`, dilation included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Culling radius in pixels.
    pub radius: f64,
}

/// Projects a Gaussian, or returns `None` when it is culled (at or behind
/// the near plane, or numerically degenerate).
pub fn project(
    mean: &Vector3<f64>,
    cov3d: &Matrix3<f64>,
    camera: &Camera,
    settings: &RenderSettings,
) -> Option<Projection> {
    let cam = camera.world_to_camera(mean);
    if !(cam.z > camera.near) {
        return None;
    }
    let f = camera.focal();
    let pp = camera.principal_point();
    let t = jacobian(&cam, f) * camera.rotation;
    let c = t * cov3d * t.transpose();
    let a = c[(0, 0)] + settings.dilation;
    let b = c[(0, 1)];
    let cc = c[(1, 1)] + settings.dilation;
    let det = a * cc - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cc / det, -b / det, a / det];
    let mid = 0.5 * (a + cc);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    Some(Projection {
        cam,
        mean2d: [f * cam.x / cam.z + pp.x, f * cam.y / cam.z + pp.y],
        cov2d: [a, b, cc],
        conic,
        depth: cam.z,
        radius: settings.cull_sigma * lambda_max.sqrt(),
    })
}

/// Affine approximation of the perspective map at camera-space point `p`.
pub fn jacobian(p: &Vector3<f64>, f: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(f * iz, 0.0, -f * p.x * iz2, 0.0, f * iz, -f * p.y * iz2)
}

/// Gradients with respect to the world-space mean and the 3D covariance,
/// given gradients of the projected mean and of the conic.
///
/// `d_conic` holds `(∂L/∂a, ∂L/∂b, ∂L/∂c)` where the off-diagonal `b` is a
/// single variable appearing twice in the quadratic form. The dependence of
/// the Jacobian on the camera-space mean is included.
pub fn project_backward(
    cov3d: &Matrix3<f64>,
    camera: &Camera,
    proj: &Projection,
    d_mean2d: [f64; 2],
    d_conic: [f64; 3],
) -> (Vector3<f64>, Matrix3<f64>) {
    let f = camera.focal();
    let p = proj.cam;
    let w = camera.rotation;
    let j = jacobian(&p, f);
    let t = j * w;

    // Conic = cov2d⁻¹: dL/dcov = -conic · G · conic with G the symmetric
    // full-matrix gradient.
    let conic = nalgebra::Matrix2::new(proj.conic[0], proj.conic[1], proj.conic[1], proj.conic[2]);
    let g = nalgebra::Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    let d_cov2d = -(conic * g * conic);

    let d_cov3d = t.transpose() * d_cov2d * t;
    let d_t = 2.0 * d_cov2d * t * cov3d;
    let d_j = d_t * w.transpose();

    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_cam = Vector3::new(
        -f * iz2 * d_j[(0, 2)],
        -f * iz2 * d_j[(1, 2)],
        -f * iz2 * d_j[(0, 0)] + 2.0 * f * p.x * iz3 * d_j[(0, 2)] - f * iz2 * d_j[(1, 1)]
            + 2.0 * f * p.y * iz3 * d_j[(1, 2)],
    );
    d_cam.x += d_mean2d[0] * f * iz;
    d_cam.y += d_mean2d[1] * f * iz;
    d_cam.z += -(d_mean2d[0] * f * p.x + d_mean2d[1] * f * p.y) * iz2;

    (w.transpose() * d_cam, d_cov3d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    fn camera() -> Camera {
        Camera::look_at(Vector3::new(0.0, 0.0, -5.0), Vector3::zeros(), Vector3::y(), 0.8, 32, 32).unwrap()
    }

    #[test]
    fn on_axis_isotropic_footprint() {
        let cam = camera();
        let sigma = 0.2;
        let cov = Matrix3::identity() * sigma * sigma;
        let s = RenderSettings::default();
        let p = project(&Vector3::zeros(), &cov, &cam, &s).unwrap();
        let expected = (cam.focal() * sigma / 5.0).powi(2) + 0.3;
        assert_relative_eq!(p.cov2d[0], expected, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d[2], expected, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.mean2d[0], 16.0, epsilon = 1e-12);
    }

    #[test]
    fn doubling_depth_halves_offset() {
        let cam = Camera::new(
            Vector3::zeros(),
            Matrix3::identity(),
            0.8,
            32,
            32,
            0.01,
            100.0,
        )
        .unwrap();
        let s = RenderSettings::default();
        let cov = Matrix3::identity() * 0.01;
        let near = project(&Vector3::new(0.4, -0.2, 2.0), &cov, &cam, &s).unwrap();
        let far = project(&Vector3::new(0.4, -0.2, 4.0), &cov, &cam, &s).unwrap();
        let pp = cam.principal_point();
        assert_relative_eq!(far.mean2d[0] - pp.x, 0.5 * (near.mean2d[0] - pp.x), epsilon = 1e-12);
        assert_relative_eq!(far.mean2d[1] - pp.y, 0.5 * (near.mean2d[1] - pp.y), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = camera();
        let s = RenderSettings::default();
        assert!(project(&Vector3::new(0.0, 0.0, -6.0), &Matrix3::identity(), &cam, &s).is_none());
    }

    #[test]
    fn rigid_motion_of_scene_and_camera_is_invisible() {
        let cam = camera();
        let s = RenderSettings::default();
        let mean = Vector3::new(0.3, -0.1, 0.5);
        let cov = Matrix3::new(0.05, 0.01, 0.0, 0.01, 0.03, 0.005, 0.0, 0.005, 0.04);
        let a = project(&mean, &cov, &cam, &s).unwrap();

        let r = Rotation3::from_euler_angles(0.3, -0.7, 1.1).into_inner();
        let moved = Camera { position: r * cam.position, rotation: cam.rotation * r.transpose(), ..cam.clone() };
        let b = project(&(r * mean), &(r * cov * r.transpose()), &moved, &s).unwrap();
        for k in 0..2 {
            assert_relative_eq!(a.mean2d[k], b.mean2d[k], epsilon = 1e-10);
        }
        for k in 0..3 {
            assert_relative_eq!(a.cov2d[k], b.cov2d[k], epsilon = 1e-10);
        }
        assert_relative_eq!(a.depth, b.depth, epsilon = 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cam = Camera::look_at(Vector3::new(1.0, -4.0, 2.0), Vector3::zeros(), Vector3::z(), 0.9, 40, 30)
            .unwrap();
        let s = RenderSettings::default();
        let mean = Vector3::new(0.3, 0.2, -0.4);
        let cov = Matrix3::new(0.05, 0.01, -0.02, 0.01, 0.08, 0.004, -0.02, 0.004, 0.03);
        let wm = [0.7, -1.3];
        let wc = [2.0, -0.6, 1.4];
        let loss = |mean: &Vector3<f64>, cov: &Matrix3<f64>| {
            let p = project(mean, cov, &cam, &s).unwrap();
            wm[0] * p.mean2d[0] + wm[1] * p.mean2d[1] + wc[0] * p.conic[0] + wc[1] * p.conic[1] + wc[2] * p.conic[2]
        };
        let p = project(&mean, &cov, &cam, &s).unwrap();
        let (d_mean, d_cov) = project_backward(&cov, &cam, &p, wm, wc);
        let eps = 1e-6;
        for a in 0..3 {
            let mut mp = mean;
            let mut mm = mean;
            mp[a] += eps;
            mm[a] -= eps;
            let fd = (loss(&mp, &cov) - loss(&mm, &cov)) / (2.0 * eps);
            assert_relative_eq!(d_mean[a], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
        // Perturb symmetric pairs together; the symmetric gradient splits evenly.
        for i in 0..3 {
            for j in i..3 {
                let mut cp = cov;
                let mut cm = cov;
                cp[(i, j)] += eps;
                cm[(i, j)] -= eps;
                if i != j {
                    cp[(j, i)] += eps;
                    cm[(j, i)] -= eps;
                }
                let fd = (loss(&mean, &cp) - loss(&mean, &cm)) / (2.0 * eps);
                let an = if i == j { d_cov[(i, i)] } else { d_cov[(i, j)] + d_cov[(j, i)] };
                assert_relative_eq!(an, fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }
}
