use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::covariance;
use super::sh::{self, coeff_count};
use crate::error::{Error, Result};

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a [f64; 3]>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Aabb::new(first, first);
        for p in it {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }

    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a])
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Grows every side by `fraction` of the extent along that axis.
    pub fn dilated(&self, fraction: f64) -> Self {
        let e = self.extent();
        Aabb {
            min: std::array::from_fn(|a| self.min[a] - fraction * e[a]),
            max: std::array::from_fn(|a| self.max[a] + fraction * e[a]),
        }
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// One Gaussian as a plain record; the set itself is stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub id: u64,
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub sh: Vec<f64>,
    pub opacity_logit: f64,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }
}

/// Structure-of-arrays storage of Gaussian attributes.
///
/// Rotations are raw quaternions `(w, x, y, z)`, normalized only when a
/// covariance is built. Scales live in log space and opacity in logit space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub ids: Vec<u64>,
    pub means: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    /// `len * coeffs_per_gaussian()` values, see [`crate::scene::sh`].
    pub sh: Vec<f64>,
    pub opacity_logits: Vec<f64>,
}

impl GaussianSet {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= sh::MAX_SH_DEGREE, "SH degree {sh_degree} unsupported");
        GaussianSet {
            sh_degree,
            ids: Vec::new(),
            means: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            sh: Vec::new(),
            opacity_logits: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of SH values per Gaussian (3 channels × basis count).
    pub fn coeffs_per_gaussian(&self) -> usize {
        3 * coeff_count(self.sh_degree)
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let k = self.coeffs_per_gaussian();
        &self.sh[i * k..(i + 1) * k]
    }

    pub fn sh_of_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.coeffs_per_gaussian();
        &mut self.sh[i * k..(i + 1) * k]
    }

    pub fn next_id(&self) -> u64 {
        self.ids.iter().max().map_or(0, |m| m + 1)
    }

    pub fn push(&mut self, g: Gaussian) {
        assert_eq!(g.sh.len(), self.coeffs_per_gaussian(), "SH length mismatch");
        self.ids.push(g.id);
        self.means.push(g.mean);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.sh.extend_from_slice(&g.sh);
        self.opacity_logits.push(g.opacity_logit);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            id: self.ids[i],
            mean: self.means[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            sh: self.sh_of(i).to_vec(),
            opacity_logit: self.opacity_logits[i],
        }
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(f64::exp)
    }

    pub fn covariance(&self, i: usize) -> Result<Matrix3<f64>> {
        covariance::covariance(self.rotations[i], self.scale(i))
    }

    pub fn mean(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.means[i])
    }

    /// Bounding box of the means, `None` for an empty set.
    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(self.means.iter())
    }

    /// Index of each id, in storage order.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Keeps the Gaussians for which `keep[i]` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let k = self.coeffs_per_gaussian();
        let mut sh = Vec::with_capacity(self.sh.len());
        for (i, &kp) in keep.iter().enumerate() {
            if kp {
                sh.extend_from_slice(&self.sh[i * k..(i + 1) * k]);
            }
        }
        self.sh = sh;
        retain_by(&mut self.ids, keep);
        retain_by(&mut self.means, keep);
        retain_by(&mut self.rotations, keep);
        retain_by(&mut self.log_scales, keep);
        retain_by(&mut self.opacity_logits, keep);
    }

    /// Subset with the given storage indices, in that order.
    pub fn select(&self, indices: &[usize]) -> GaussianSet {
        let mut out = GaussianSet::new(self.sh_degree);
        for &i in indices {
            out.push(self.get(i));
        }
        out
    }

    /// Rows whose id is in `ids`, in storage order.
    pub fn select_ids(&self, ids: &std::collections::HashSet<u64>) -> GaussianSet {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| ids.contains(&self.ids[i])).collect();
        self.select(&keep)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.means.len(),
            self.rotations.len(),
            self.log_scales.len(),
            self.opacity_logits.len(),
            self.sh.len() / self.coeffs_per_gaussian().max(1),
        ];
        if lens.iter().any(|&l| l != n) || self.sh.len() != n * self.coeffs_per_gaussian() {
            return Err(Error::ShapeMismatch(format!("attribute arrays disagree in length: {n} vs {lens:?}")));
        }
        let mut ids = self.ids.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate Gaussian ids".into()));
        }
        for i in 0..n {
            if !self.scale(i).iter().all(|s| s.is_finite() && *s > 0.0) {
                return Err(Error::InvalidArgument(format!("Gaussian {} has a non-positive scale", self.ids[i])));
            }
            covariance::normalize_quat(self.rotations[i])?;
        }
        Ok(())
    }
}

fn retain_by<T>(v: &mut Vec<T>, keep: &[bool]) {
    let mut it = keep.iter();
    v.retain(|_| *it.next().unwrap());
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, x: f64) -> Gaussian {
        Gaussian {
            id,
            mean: [x, 0.0, 0.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            sh: vec![x; 3],
            opacity_logit: 0.0,
        }
    }

    #[test]
    fn retain_keeps_arrays_aligned() {
        let mut set = GaussianSet::new(0);
        for i in 0..5 {
            set.push(sample(i, i as f64));
        }
        set.retain_mask(&[true, false, true, false, true]);
        assert_eq!(set.ids, vec![0, 2, 4]);
        assert_eq!(set.sh, vec![0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 4.0, 4.0, 4.0]);
        assert_eq!(set.means[2], [4.0, 0.0, 0.0]);
        set.validate().unwrap();
    }

    #[test]
    fn duplicate_ids_fail_validation() {
        let mut set = GaussianSet::new(0);
        set.push(sample(1, 0.0));
        set.push(sample(1, 1.0));
        assert!(set.validate().is_err());
    }

    #[test]
    fn aabb_contains_means() {
        let mut set = GaussianSet::new(0);
        for i in 0..4 {
            set.push(sample(i, i as f64 - 1.5));
        }
        let b = set.aabb().unwrap();
        assert!(set.means.iter().all(|m| b.contains(m)));
        assert_eq!(b.min[0], -1.5);
        assert_eq!(b.max[0], 1.5);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for p in [0.01, 0.1, 0.5, 0.99] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }
}
