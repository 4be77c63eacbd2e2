//! 3D covariance from rotation quaternion and scale, `Σ = R S Sᵀ Rᵀ`, with
//! the reverse-mode derivative used by the trainer.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub const MIN_QUAT_NORM: f64 = 1e-8;
/// Added to the diagonal before inverting a covariance.
pub const COV_REGULARIZATION: f64 = 1e-8;

/// Quaternion `(w, x, y, z)` normalized, or an error if degenerate.
pub fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n > MIN_QUAT_NORM) {
        return Err(Error::DegenerateQuaternion(n));
    }
    Ok(q.map(|v| v / n))
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R S Sᵀ Rᵀ` for a raw (unnormalized) quaternion and linear scales.
pub fn covariance(q: [f64; 4], scale: [f64; 3]) -> Result<Matrix3<f64>> {
    let r = quat_to_matrix(normalize_quat(q)?);
    let m = r * Matrix3::from_diagonal(&Vector3::from(scale));
    Ok(m * m.transpose())
}

/// Gradients of a loss through `covariance(q, exp(log_scale))`.
///
/// `d_sigma` is the gradient with respect to the full symmetric matrix.
/// Returns `(d_q_raw, d_log_scale)`.
pub fn covariance_backward(
    q: [f64; 4],
    log_scale: [f64; 3],
    d_sigma: &Matrix3<f64>,
) -> Result<([f64; 4], [f64; 3])> {
    let qn = normalize_quat(q)?;
    let scale = log_scale.map(f64::exp);
    let r = quat_to_matrix(qn);
    let s = Matrix3::from_diagonal(&Vector3::from(scale));
    let m = r * s;
    // Σ = M Mᵀ, so dL/dM = (G + Gᵀ) M.
    let d_m = (d_sigma + d_sigma.transpose()) * m;

    // M = R S with S diagonal.
    let mut d_log_scale = [0.0; 3];
    for j in 0..3 {
        let mut acc = 0.0;
        for i in 0..3 {
            acc += r[(i, j)] * d_m[(i, j)];
        }
        d_log_scale[j] = acc * scale[j];
    }
    let d_r = d_m * s;

    let [w, x, y, z] = qn;
    let g = |i: usize, j: usize| d_r[(i, j)];
    let d_w = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let d_x = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let d_y = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let d_z = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let d_qn = [d_w, d_x, d_y, d_z];
    Ok((normalize_backward(q, d_qn), d_log_scale))
}

/// Backward of `q / |q|`.
pub fn normalize_backward(q: [f64; 4], d_qn: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let qn = q.map(|v| v / n);
    let dot: f64 = (0..4).map(|i| qn[i] * d_qn[i]).sum();
    std::array::from_fn(|i| (d_qn[i] - qn[i] * dot) / n)
}

/// Unnormalized Gaussian `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn gaussian_value(mean: &Vector3<f64>, sigma: &Matrix3<f64>, x: &Vector3<f64>) -> Result<f64> {
    let reg = sigma + Matrix3::identity() * COV_REGULARIZATION;
    let inv = reg.try_inverse().ok_or(Error::SingularCovariance)?;
    let d = x - mean;
    let m = d.dot(&(inv * d));
    if !m.is_finite() {
        return Err(Error::SingularCovariance);
    }
    Ok((-0.5 * m).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

    #[test]
    fn identity_rotation_unit_scale() {
        let c = covariance(IDENTITY, [1.0; 3]).unwrap();
        assert_relative_eq!(c, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn axis_aligned_scaling() {
        let c = covariance(IDENTITY, [2.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = [h.cos(), 0.0, 0.0, h.sin()];
        let c = covariance(q, [2.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_quaternion_is_rejected() {
        assert!(matches!(
            covariance([0.0, 1e-10, 0.0, 0.0], [1.0; 3]),
            Err(Error::DegenerateQuaternion(_))
        ));
    }

    #[test]
    fn gaussian_value_cases() {
        let mu = Vector3::new(0.3, -1.0, 2.0);
        let eye = Matrix3::identity();
        assert_relative_eq!(gaussian_value(&mu, &eye, &mu).unwrap(), 1.0);
        let x = mu + Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(gaussian_value(&mu, &eye, &x).unwrap(), (-0.5f64).exp(), epsilon = 1e-7);
        let sigma = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        let x = mu + Vector3::new(2.0, 0.0, 0.0);
        assert_relative_eq!(gaussian_value(&mu, &sigma, &x).unwrap(), 0.606_530_66, epsilon = 1e-7);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let q = [0.8, -0.3, 0.4, 0.2];
        let ls = [0.1, -0.4, 0.3];
        // Arbitrary linear functional of Σ.
        let w = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 1.1, 0.2, -0.9);
        let loss = |q: [f64; 4], ls: [f64; 3]| {
            let c = covariance(q, ls.map(f64::exp)).unwrap();
            c.component_mul(&w).sum()
        };
        let (dq, dls) = covariance_backward(q, ls, &w).unwrap();
        let eps = 1e-6;
        for i in 0..4 {
            let (mut p, mut m) = (q, q);
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss(p, ls) - loss(m, ls)) / (2.0 * eps);
            assert_relative_eq!(dq[i], fd, epsilon = 1e-7);
        }
        for i in 0..3 {
            let (mut p, mut m) = (ls, ls);
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss(q, p) - loss(q, m)) / (2.0 * eps);
            assert_relative_eq!(dls[i], fd, epsilon = 1e-7);
        }
    }

    fn quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |q| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-2
        })
    }

    proptest! {
        #[test]
        fn double_cover(q in quat(), s in prop::array::uniform3(0.05f64..3.0)) {
            let a = covariance(q, s).unwrap();
            let b = covariance(q.map(|v| -v), s).unwrap();
            prop_assert!((a - b).abs().max() <= 1e-12 * a.abs().max().max(1.0));
        }

        #[test]
        fn determinant_is_squared_volume(q in quat(), s in prop::array::uniform3(0.05f64..3.0)) {
            let c = covariance(q, s).unwrap();
            let expected = (s[0] * s[1] * s[2]).powi(2);
            prop_assert!((c.determinant() - expected).abs() <= 1e-9 * expected.max(1e-12));
        }

        #[test]
        fn eigenvalues_are_squared_scales(q in quat(), s in prop::array::uniform3(0.05f64..3.0)) {
            let c = covariance(q, s).unwrap();
            prop_assert!((c - c.transpose()).abs().max() < 1e-12);
            let mut eig: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut sq: Vec<f64> = s.iter().map(|v| v * v).collect();
            sq.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&sq) {
                prop_assert!((a - b).abs() < 1e-9 * b.max(1.0));
            }
        }
    }
}
