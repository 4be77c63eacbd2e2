//! Adaptive density control: clone, split and prune.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::groups::GaussianAdam;
use crate::raster::GaussianGrads;
use crate::scene::covariance::{normalize_quat, quat_to_matrix};
use crate::scene::GaussianSet;

/// Split children shrink their scale by this factor.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Running screen-space gradient statistics, row-aligned with the set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub visible_count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats {
            grad_sum: vec![0.0; n],
            visible_count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, grads: &GaussianGrads) {
        for i in 0..self.grad_sum.len() {
            if grads.visible[i] {
                self.grad_sum[i] += grads.screen_grad_norm[i];
                self.visible_count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        match self.visible_count[i] {
            0 => 0.0,
            c => self.grad_sum[i] / c as f64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DensifyParams {
    pub grad_threshold: f64,
    /// World-space size separating clone (≤) from split (>).
    pub size_threshold: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Prunes translucent Gaussians, then clones or splits the ones with large
/// mean gradients, highest gradients first, without exceeding
/// `max_gaussians`. Optimizer moments follow the rows; new rows start at zero.
pub fn densify_prune(
    set: &mut GaussianSet,
    adam: &mut GaussianAdam,
    stats: &DensifyStats,
    params: &DensifyParams,
    rng: &mut impl Rng,
) -> DensifyReport {
    let n = set.len();
    let mut report = DensifyReport::default();
    let mut keep = vec![true; n];
    for i in 0..n {
        if set.opacity(i) < params.prune_opacity {
            keep[i] = false;
            report.pruned += 1;
        }
    }
    let mut count = n - report.pruned;

    let mut candidates: Vec<usize> = (0..n).filter(|&i| keep[i] && stats.mean(i) >= params.grad_threshold).collect();
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));

    let mut next_id = set.next_id();
    let mut added = Vec::new();
    for i in candidates {
        // Both operations add one Gaussian net.
        if count + 1 > params.max_gaussians {
            break;
        }
        let g = set.get(i);
        let scale = set.scale(i);
        let largest = scale.iter().cloned().fold(f64::MIN, f64::max);
        if largest <= params.size_threshold {
            let mut c = g.clone();
            c.id = next_id;
            next_id += 1;
            added.push(c);
            report.cloned += 1;
        } else {
            // Degenerate rotations split axis-aligned.
            let r = normalize_quat(g.rotation).map(quat_to_matrix).unwrap_or_else(|_| nalgebra::Matrix3::identity());
            for _ in 0..2 {
                let z = Vector3::from_fn(|a, _| scale[a] * rng.sample::<f64, _>(StandardNormal));
                let offset = r * z;
                let mut c = g.clone();
                c.id = next_id;
                next_id += 1;
                for a in 0..3 {
                    c.mean[a] += offset[a];
                    c.log_scale[a] -= SPLIT_SCALE_DIVISOR.ln();
                }
                added.push(c);
            }
            keep[i] = false;
            report.split += 1;
        }
        count += 1;
    }

    if keep.iter().any(|&k| !k) {
        set.retain_mask(&keep);
        adam.retain(&keep);
    }
    let new = added.len();
    for g in added {
        set.push(g);
    }
    adam.extend(new);
    report
}
