//! Color-level segmentation: view-independent colors clustered with k-means,
//! plus radius-based outlier removal.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Frame;
use crate::scene::{sh, GaussianSet};
use crate::synth::fibonacci_sphere;

pub const DEFAULT_DIRECTIONS: usize = 256;
pub const DEFAULT_MIN_NEIGHBORS: usize = 3;
pub const MAX_LLOYD_ITERS: usize = 100;

/// Mean of the clamped SH color over `directions`.
pub fn view_independent_color(sh_degree: usize, coeffs: &[f64], directions: &[Vector3<f64>]) -> Result<[f64; 3]> {
    if directions.is_empty() {
        return Err(Error::InvalidArgument("view-independent color needs at least one direction".into()));
    }
    let mut acc = [0.0; 3];
    for d in directions {
        let c = sh::sh_to_rgb(sh_degree, coeffs, d);
        for k in 0..3 {
            acc[k] += c[k];
        }
    }
    Ok(acc.map(|v| v / directions.len() as f64))
}

/// View-independent color of every Gaussian from `n` Fibonacci directions.
pub fn view_independent_colors(set: &GaussianSet, n: usize) -> Result<Vec<[f64; 3]>> {
    let dirs = fibonacci_sphere(n);
    (0..set.len())
        .into_par_iter()
        .map(|i| view_independent_color(set.sh_degree, set.sh_of(i), &dirs))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<u32>,
    pub centroids: Vec<[f64; 3]>,
    pub iterations: usize,
    pub inertia: f64,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, dist2(p, &centroids[0]));
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing (at most [`MAX_LLOYD_ITERS`]). An emptied cluster keeps its
/// previous centroid.
pub fn kmeans_colors(colors: &[[f64; 3]], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > colors.len() {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in [1, {}]", colors.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![colors[rng.gen_range(0..colors.len())]];
    let mut chosen = vec![false; colors.len()];
    let mut d2: Vec<f64> = colors.iter().map(|c| dist2(c, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = d2.iter().rposition(|&d| d > 0.0).unwrap();
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            // All remaining points coincide with centroids.
            (0..colors.len()).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.push(colors[pick]);
        for (i, c) in colors.iter().enumerate() {
            d2[i] = d2[i].min(dist2(c, &colors[pick]));
        }
    }

    let mut labels = vec![u32::MAX; colors.len()];
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERS {
        iterations += 1;
        let next: Vec<u32> = colors.par_iter().map(|c| nearest(c, &centroids).0 as u32).collect();
        let changed = next != labels;
        labels = next;
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (c, &l) in colors.iter().zip(&labels) {
            for a in 0..3 {
                sums[l as usize][a] += c[a];
            }
            counts[l as usize] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = colors.iter().zip(&labels).map(|(c, &l)| dist2(c, &centroids[l as usize])).sum();
    Ok(KMeans {
        labels,
        centroids,
        iterations,
        inertia,
    })
}

/// Per-Gaussian color labels, keyed by Gaussian id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseSegmentation {
    pub k: usize,
    pub ids: Vec<u64>,
    pub labels: Vec<u32>,
    pub centroids: Vec<[f64; 3]>,
    pub directions: usize,
    pub seed: u64,
}

impl CoarseSegmentation {
    pub fn compute(set: &GaussianSet, k: usize, seed: u64, directions: usize) -> Result<Self> {
        let colors = view_independent_colors(set, directions)?;
        let km = kmeans_colors(&colors, k, seed)?;
        Ok(CoarseSegmentation {
            k,
            ids: set.ids.clone(),
            labels: km.labels,
            centroids: km.centroids,
            directions,
            seed,
        })
    }

    pub fn label_of(&self, id: u64) -> Option<u32> {
        // Ids are stored in set order, which is not necessarily sorted.
        self.ids.iter().position(|&x| x == id).map(|i| self.labels[i])
    }

    pub fn label_map(&self) -> HashMap<u64, u32> {
        self.ids.iter().copied().zip(self.labels.iter().copied()).collect()
    }

    /// Ids carrying `label`, in stored order.
    pub fn members(&self, label: u32) -> Vec<u64> {
        self.ids.iter().zip(&self.labels).filter(|(_, &l)| l == label).map(|(&id, _)| id).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.labels.len() || self.centroids.len() != self.k {
            return Err(Error::ShapeMismatch("coarse segmentation arrays disagree".into()));
        }
        if self.labels.iter().any(|&l| l as usize >= self.k) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        if self.centroids.iter().flatten().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("centroid outside the unit color cube".into()));
        }
        Ok(())
    }
}

/// Uniform hash grid over points with cell size `cell`.
pub struct SpatialHash {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl SpatialHash {
    pub fn new(points: &[[f64; 3]], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        SpatialHash { cell, cells }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    /// Indices of points within `radius ≤ cell` of `p` (inclusive), excluding `skip`.
    pub fn count_within(&self, points: &[[f64; 3]], p: &[f64; 3], radius: f64, skip: usize) -> usize {
        let k = Self::key(p, self.cell);
        let r2 = radius * radius;
        let mut n = 0;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        n += list.iter().filter(|&&j| j != skip && dist2(p, &points[j]) <= r2).count();
                    }
                }
            }
        }
        n
    }
}

fn member_means(ids: &[u64], set: &GaussianSet) -> Vec<[f64; 3]> {
    let index: HashMap<u64, usize> = set.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    ids.iter().filter_map(|id| index.get(id).map(|&i| set.means[i])).collect()
}

/// Multiplier on the median k-th neighbour distance in [`default_outlier_radius`].
pub const OUTLIER_RADIUS_FACTOR: f64 = 4.0;

/// `OUTLIER_RADIUS_FACTOR` times the median distance from a member to its
/// `min_neighbors`-th nearest fellow member. `None` when the segment has
/// too few members or the median is zero.
pub fn default_outlier_radius(ids: &[u64], set: &GaussianSet, min_neighbors: usize) -> Option<f64> {
    let pts = member_means(ids, set);
    let k = min_neighbors.max(1);
    if pts.len() <= k {
        return None;
    }
    let mut kth: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..pts.len()).filter(|&j| j != i).map(|j| dist2(&pts[i], &pts[j])).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1].sqrt()
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    let m = kth.len();
    let median = if m % 2 == 1 { kth[m / 2] } else { 0.5 * (kth[m / 2 - 1] + kth[m / 2]) };
    (median > 0.0).then_some(OUTLIER_RADIUS_FACTOR * median)
}

/// Keeps ids with at least `min_neighbors` other members within `radius`
/// (inclusive) of their mean. One pass; counts use the input membership.
/// Ids absent from `set` are dropped.
pub fn remove_outliers(ids: &[u64], set: &GaussianSet, radius: f64, min_neighbors: usize) -> Result<Vec<u64>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    let index: HashMap<u64, usize> = set.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let present: Vec<u64> = ids.iter().copied().filter(|id| index.contains_key(id)).collect();
    if min_neighbors == 0 {
        return Ok(present);
    }
    let pts: Vec<[f64; 3]> = present.iter().map(|id| set.means[index[id]]).collect();
    let grid = SpatialHash::new(&pts, radius);
    let keep: Vec<bool> = (0..pts.len())
        .into_par_iter()
        .map(|i| grid.count_within(&pts, &pts[i], radius, i) >= min_neighbors)
        .collect();
    Ok(present.into_iter().zip(keep).filter(|(_, k)| *k).map(|(id, _)| id).collect())
}

/// Members of every cluster with outliers removed. `radius = None` uses
/// [`default_outlier_radius`] per cluster; clusters too small for a default
/// radius keep all members.
pub fn clean_members(seg: &CoarseSegmentation, set: &GaussianSet, radius: Option<f64>, min_neighbors: usize) -> Result<Vec<Vec<u64>>> {
    (0..seg.k as u32)
        .map(|label| {
            let members = seg.members(label);
            match radius.or_else(|| default_outlier_radius(&members, set, min_neighbors)) {
                Some(r) => remove_outliers(&members, set, r, min_neighbors),
                None => Ok(members),
            }
        })
        .collect()
}

/// Coarse label of the dominant Gaussian at a pixel of a frame rendered
/// with contributor lists.
pub fn segment_of_pixel(frame: &Frame, x: usize, y: usize, seg: &CoarseSegmentation) -> Option<u32> {
    frame.pick(x, y).and_then(|id| seg.label_of(id))
}
