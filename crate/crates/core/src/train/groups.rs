//! Per-attribute Adam groups for a [`GaussianSet`].

use crate::optim::Adam;
use crate::raster::GaussianGrads;
use crate::scene::GaussianSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianLrs {
    pub means: f64,
    pub rotations: f64,
    pub log_scales: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
}

/// Moments stay row-aligned with the set through [`retain`](Self::retain)
/// and [`extend`](Self::extend).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAdam {
    pub means: Adam,
    pub rotations: Adam,
    pub log_scales: Adam,
    pub sh_dc: Adam,
    pub sh_rest: Adam,
    pub opacity: Adam,
    rest_width: usize,
}

impl GaussianAdam {
    pub fn new(set: &GaussianSet) -> Self {
        let n = set.len();
        let rest_width = set.coeffs_per_gaussian() - 3;
        GaussianAdam {
            means: Adam::new(3 * n, 0.0),
            rotations: Adam::new(4 * n, 0.0),
            log_scales: Adam::new(3 * n, 0.0),
            sh_dc: Adam::new(3 * n, 0.0),
            sh_rest: Adam::new(rest_width * n, 0.0),
            opacity: Adam::new(n, 0.0),
            rest_width,
        }
    }

    pub fn rows(&self) -> usize {
        self.opacity.len()
    }

    pub fn step(&mut self, set: &mut GaussianSet, grads: &GaussianGrads, lrs: &GaussianLrs) {
        let width = set.coeffs_per_gaussian();
        self.means.lr = lrs.means;
        self.rotations.lr = lrs.rotations;
        self.log_scales.lr = lrs.log_scales;
        self.sh_dc.lr = lrs.sh_dc;
        self.sh_rest.lr = lrs.sh_rest;
        self.opacity.lr = lrs.opacity;
        self.means.update_one(set.means.as_flattened_mut(), grads.means.as_flattened());
        self.rotations.update_one(set.rotations.as_flattened_mut(), grads.rotations.as_flattened());
        self.log_scales.update_one(set.log_scales.as_flattened_mut(), grads.log_scales.as_flattened());
        self.opacity.update_one(&mut set.opacity_logits, &grads.opacity_logits);
        self.sh_dc.update(
            set.sh.chunks_mut(width).map(|c| &mut c[..3]),
            grads.sh.chunks(width).map(|c| &c[..3]),
        );
        if self.rest_width > 0 {
            self.sh_rest.update(
                set.sh.chunks_mut(width).map(|c| &mut c[3..]),
                grads.sh.chunks(width).map(|c| &c[3..]),
            );
        }
    }

    pub fn retain(&mut self, keep: &[bool]) {
        self.means.retain_rows(keep, 3);
        self.rotations.retain_rows(keep, 4);
        self.log_scales.retain_rows(keep, 3);
        self.sh_dc.retain_rows(keep, 3);
        if self.rest_width > 0 {
            self.sh_rest.retain_rows(keep, self.rest_width);
        }
        self.opacity.retain_rows(keep, 1);
    }

    /// Zero moments for `count` appended Gaussians.
    pub fn extend(&mut self, count: usize) {
        self.means.extend_zeros(3 * count);
        self.rotations.extend_zeros(4 * count);
        self.log_scales.extend_zeros(3 * count);
        self.sh_dc.extend_zeros(3 * count);
        self.sh_rest.extend_zeros(self.rest_width * count);
        self.opacity.extend_zeros(count);
    }
}
