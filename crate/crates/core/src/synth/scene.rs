//! Analytic time-varying density blobs.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::scene::Aabb;

/// One density blob with compact support `peak · (1 − q²)²`, `q = |x − c(t)| / r(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub name: String,
    /// Per axis, cubic coefficients `[c0, c1, c2, c3]` of `c0 + c1 t + c2 t² + c3 t³`.
    pub trajectory: [[f64; 4]; 3],
    /// Polynomial coefficients of the radius in `t`, lowest order first.
    pub radius: Vec<f64>,
    pub color: [f64; 3],
    pub peak_density: f64,
    /// Leaf segment id, unique per blob.
    pub segment: u32,
    /// Grouping segment this blob belongs to, if any. A parent has no
    /// density of its own.
    #[serde(default)]
    pub parent: Option<u32>,
}

fn poly(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * t + k)
}

impl Blob {
    pub fn center(&self, t: f64) -> Vector3<f64> {
        Vector3::new(poly(&self.trajectory[0], t), poly(&self.trajectory[1], t), poly(&self.trajectory[2], t))
    }

    pub fn radius_at(&self, t: f64) -> f64 {
        poly(&self.radius, t)
    }

    pub fn density(&self, x: &Vector3<f64>, t: f64) -> f64 {
        let r = self.radius_at(t);
        let q2 = (x - self.center(t)).norm_squared() / (r * r);
        if q2 >= 1.0 {
            0.0
        } else {
            let a = 1.0 - q2;
            self.peak_density * a * a
        }
    }

    /// Spatial gradient of the density.
    pub fn density_gradient(&self, x: &Vector3<f64>, t: f64) -> Vector3<f64> {
        let r = self.radius_at(t);
        let d = x - self.center(t);
        let q2 = d.norm_squared() / (r * r);
        if q2 >= 1.0 {
            Vector3::zeros()
        } else {
            d * (-4.0 * self.peak_density * (1.0 - q2) / (r * r))
        }
    }

    /// Optical depth along a chord at normalized impact parameter `b`
    /// through the blob: `peak · r · (16/15) · (1 − b²)^{5/2}`.
    pub fn chord_optical_depth(&self, b: f64, t: f64) -> f64 {
        if b >= 1.0 {
            return 0.0;
        }
        self.peak_density * self.radius_at(t) * 16.0 / 15.0 * (1.0 - b * b).powf(2.5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub name: String,
    pub blobs: Vec<Blob>,
    pub aabb: Aabb,
    pub time_range: [f64; 2],
    /// Scale emitted color by a view-dot-gradient factor.
    #[serde(default)]
    pub shading: bool,
}

impl AnalyticScene {
    pub fn validate(&self) -> crate::Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.blobs {
            if !(b.peak_density >= 0.0) || b.radius.is_empty() {
                return Err(crate::Error::InvalidArgument(format!("blob {} has invalid density or radius", b.name)));
            }
            for t in [self.time_range[0], 0.5 * (self.time_range[0] + self.time_range[1]), self.time_range[1]] {
                if !(b.radius_at(t) > 0.0) || !b.center(t).iter().all(|v| v.is_finite()) {
                    return Err(crate::Error::InvalidArgument(format!("blob {} degenerate at t={t}", b.name)));
                }
            }
            if !seen.insert(b.segment) {
                return Err(crate::Error::InvalidArgument(format!("duplicate segment id {}", b.segment)));
            }
        }
        Ok(())
    }

    /// Indices of blobs whose segment or parent equals `segment`.
    pub fn blobs_of_segment(&self, segment: u32) -> Vec<usize> {
        self.blobs
            .iter()
            .enumerate()
            .filter(|(_, b)| b.segment == segment || b.parent == Some(segment))
            .map(|(i, _)| i)
            .collect()
    }

    /// Scene with only the given blobs.
    pub fn subset(&self, blobs: &[usize]) -> AnalyticScene {
        AnalyticScene {
            blobs: blobs.iter().map(|&i| self.blobs[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Three blobs in two colors: a red blob and a blue group made of two
    /// slightly overlapping sub-blobs that move together with some
    /// relative motion.
    pub fn blobs3() -> Self {
        let blue = [0.1, 0.3, 1.0];
        AnalyticScene {
            name: "blobs3".into(),
            blobs: vec![
                Blob {
                    name: "red".into(),
                    trajectory: [[-0.5, 0.08, 0.05, -0.05], [0.05, 0.25, -0.1, 0.0], [0.0, -0.1, 0.2, -0.05]],
                    radius: vec![0.36, 0.04, -0.04],
                    color: [1.0, 0.2, 0.1],
                    peak_density: 18.0,
                    segment: 0,
                    parent: None,
                },
                Blob {
                    name: "blue-1".into(),
                    trajectory: [[0.38, -0.09, 0.08, 0.0], [-0.17, 0.1, -0.15, 0.05], [-0.14, 0.12, -0.1, 0.0]],
                    radius: vec![0.26, 0.02],
                    color: blue,
                    peak_density: 22.0,
                    segment: 1,
                    parent: Some(3),
                },
                Blob {
                    name: "blue-2".into(),
                    trajectory: [[0.38, -0.15, 0.08, 0.0], [0.17, 0.1, -0.15, 0.05], [0.14, 0.12, -0.1, 0.0]],
                    radius: vec![0.25, -0.02],
                    color: blue,
                    peak_density: 22.0,
                    segment: 2,
                    parent: Some(3),
                },
            ],
            aabb: Aabb::new([-1.0; 3], [1.0; 3]),
            time_range: [0.0, 1.0],
            shading: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs3_is_valid_and_contained() {
        let s = AnalyticScene::blobs3();
        s.validate().unwrap();
        for b in &s.blobs {
            for k in 0..=20 {
                let t = k as f64 / 20.0;
                let c = b.center(t);
                let r = b.radius_at(t);
                for a in 0..3 {
                    assert!(c[a] - r > -1.0 && c[a] + r < 1.0, "{} leaves the box at t={t}", b.name);
                }
            }
        }
        assert_eq!(s.blobs_of_segment(3), vec![1, 2]);
        assert_eq!(s.blobs_of_segment(0), vec![0]);
    }

    #[test]
    fn blue_sub_blobs_overlap_slightly() {
        let s = AnalyticScene::blobs3();
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let d = (s.blobs[1].center(t) - s.blobs[2].center(t)).norm();
            let rsum = s.blobs[1].radius_at(t) + s.blobs[2].radius_at(t);
            assert!(d < rsum && d > 0.7 * rsum, "t={t}: d={d}, r1+r2={rsum}");
            for k in [1, 2] {
                let gap = (s.blobs[0].center(t) - s.blobs[k].center(t)).norm() - s.blobs[0].radius_at(t) - s.blobs[k].radius_at(t);
                assert!(gap > 0.05, "red touches blue at t={t}");
            }
        }
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let b = &AnalyticScene::blobs3().blobs[0];
        let x = Vector3::new(-0.3, 0.1, 0.05);
        let g = b.density_gradient(&x, 0.3);
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = 1e-6;
            let fd = (b.density(&(x + e), 0.3) - b.density(&(x - e), 0.3)) / 2e-6;
            assert!((g[a] - fd).abs() < 1e-5);
        }
    }
}
