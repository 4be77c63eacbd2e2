//! Real spherical harmonics up to degree 2.
//!
//! Coefficients for one Gaussian are stored band-major, channel-minor:
//! `coeffs[k * 3 + c]` is basis function `k` for color channel `c`. Basis
//! ordering and signs follow the usual splatting convention
//! (`Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22`).

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Offset added to the raw SH sum before clamping to `[0, 1]`.
pub const COLOR_OFFSET: f64 = 0.5;

pub const MAX_SH_DEGREE: usize = 2;

/// Number of basis functions for a given degree, `(L + 1)^2`.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values at unit direction `d`. Entries beyond `coeff_count(degree)`
/// are left at zero.
pub fn basis(degree: usize, d: &Vector3<f64>) -> [f64; 9] {
    let mut b = [0.0; 9];
    b[0] = SH_C0;
    if degree >= 1 {
        let (x, y, z) = (d.x, d.y, d.z);
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
        if degree >= 2 {
            b[4] = SH_C2[0] * x * y;
            b[5] = SH_C2[1] * y * z;
            b[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
            b[7] = SH_C2[3] * x * z;
            b[8] = SH_C2[4] * (x * x - y * y);
        }
    }
    b
}

/// Partial derivatives of each basis polynomial with respect to the
/// direction components.
pub fn basis_grad(degree: usize, d: &Vector3<f64>) -> [Vector3<f64>; 9] {
    let mut g = [Vector3::zeros(); 9];
    if degree >= 1 {
        let (x, y, z) = (d.x, d.y, d.z);
        g[1] = Vector3::new(0.0, -SH_C1, 0.0);
        g[2] = Vector3::new(0.0, 0.0, SH_C1);
        g[3] = Vector3::new(-SH_C1, 0.0, 0.0);
        if degree >= 2 {
            g[4] = SH_C2[0] * Vector3::new(y, x, 0.0);
            g[5] = SH_C2[1] * Vector3::new(0.0, z, y);
            g[6] = SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
            g[7] = SH_C2[3] * Vector3::new(z, 0.0, x);
            g[8] = SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
        }
    }
    g
}

/// Raw SH sum `Σ c_k Y_k(d)` per channel, before offset and clamping.
pub fn eval_sh(degree: usize, coeffs: &[f64], d: &Vector3<f64>) -> [f64; 3] {
    let k = coeff_count(degree);
    debug_assert!(coeffs.len() >= k * 3);
    let b = basis(degree, d);
    let mut rgb = [0.0; 3];
    for (i, bi) in b.iter().enumerate().take(k) {
        for c in 0..3 {
            rgb[c] += bi * coeffs[i * 3 + c];
        }
    }
    rgb
}

/// Rendered color: `clamp(eval_sh + 0.5, 0, 1)`.
pub fn sh_to_rgb(degree: usize, coeffs: &[f64], d: &Vector3<f64>) -> [f64; 3] {
    eval_sh(degree, coeffs, d).map(|v| (v + COLOR_OFFSET).clamp(0.0, 1.0))
}

/// DC coefficient that reproduces `rgb` under the rendered-color convention.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - COLOR_OFFSET) / SH_C0
}
