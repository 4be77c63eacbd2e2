//! Spatiotemporal feature encoders: a low-rank factorized grid (three planes,
//! three spatial vectors and one temporal vector) and a fully implicit
//! positional encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scene::Aabb;

/// How spatial and temporal features are combined before the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// `[s_0..s_{R_s-1}, u_0..u_{R_t-1}]`.
    #[default]
    Concat,
    /// `s_r · u_q` for every pair, `R_s · R_t` values.
    Outer,
}

/// Plane axes `(a, b)` and the axis of the vector paired with each plane.
pub const PLANE_AXES: [(usize, usize, usize); 3] = [(0, 1, 2), (0, 2, 1), (1, 2, 0)];

/// Linear interpolation coordinate along one grid axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCoord {
    pub i0: usize,
    pub frac: f64,
    /// `d(grid coordinate)/d(input)`, zero where the input was clamped.
    pub slope: f64,
}

impl GridCoord {
    /// Maps `x ∈ [lo, hi]` onto nodes `0..n` so node `k` sits exactly at
    /// `lo + k·(hi-lo)/(n-1)`. Inputs outside the range are clamped.
    pub fn new(x: f64, lo: f64, hi: f64, n: usize) -> Self {
        let extent = hi - lo;
        let scale = if extent > 0.0 { (n - 1) as f64 / extent } else { 0.0 };
        let mut g = (x - lo) * scale;
        let mut slope = scale;
        if !(g > 0.0) {
            if g < 0.0 || g.is_nan() {
                slope = 0.0;
            }
            g = 0.0;
        } else if g >= (n - 1) as f64 {
            if g > (n - 1) as f64 {
                slope = 0.0;
            }
            g = (n - 1) as f64;
        }
        let i0 = (g.floor() as usize).min(n - 2);
        GridCoord {
            i0,
            frac: g - i0 as f64,
            slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedEncoder {
    pub n: usize,
    pub t_res: usize,
    pub rank_s: usize,
    pub rank_t: usize,
    pub combine: Combine,
    pub aabb: Aabb,
    pub time_range: [f64; 2],
    /// XY, XZ, YZ planes; entry `(i, j, r)` at `(i*n + j)*rank_s + r`.
    pub planes: [Vec<f64>; 3],
    /// X, Y, Z vectors; entry `(i, r)` at `i*rank_s + r`.
    pub vectors: [Vec<f64>; 3],
    /// Entry `(i, r)` at `i*rank_t + r`.
    pub temporal: Vec<f64>,
}

impl FactorizedEncoder {
    pub fn zeros(n: usize, t_res: usize, rank_s: usize, rank_t: usize, combine: Combine, aabb: Aabb, time_range: [f64; 2]) -> Self {
        assert!(n >= 2 && t_res >= 2 && rank_s >= 1 && rank_t >= 1, "encoder dimensions too small");
        FactorizedEncoder {
            n,
            t_res,
            rank_s,
            rank_t,
            combine,
            aabb,
            time_range,
            planes: std::array::from_fn(|_| vec![0.0; n * n * rank_s]),
            vectors: std::array::from_fn(|_| vec![0.0; n * rank_s]),
            temporal: vec![0.0; t_res * rank_t],
        }
    }

    /// Entries uniform in `[-range, range]`.
    pub fn random(
        n: usize,
        t_res: usize,
        rank_s: usize,
        rank_t: usize,
        combine: Combine,
        aabb: Aabb,
        time_range: [f64; 2],
        range: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut e = Self::zeros(n, t_res, rank_s, rank_t, combine, aabb, time_range);
        for s in e.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = rng.gen_range(-range..=range));
        }
        e
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.t_res, self.rank_s, self.rank_t, self.combine, self.aabb, self.time_range)
    }

    pub fn output_dim(&self) -> usize {
        match self.combine {
            Combine::Concat => self.rank_s + self.rank_t,
            Combine::Outer => self.rank_s * self.rank_t,
        }
    }

    pub fn param_count(&self) -> usize {
        3 * self.n * self.n * self.rank_s + 3 * self.n * self.rank_s + self.t_res * self.rank_t
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.planes.iter().map(Vec::as_slice).collect();
        v.extend(self.vectors.iter().map(Vec::as_slice));
        v.push(&self.temporal);
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.planes.iter_mut().map(Vec::as_mut_slice).collect();
        v.extend(self.vectors.iter_mut().map(Vec::as_mut_slice));
        v.push(&mut self.temporal);
        v
    }

    fn coords(&self, x: &[f64; 3]) -> [GridCoord; 3] {
        std::array::from_fn(|a| GridCoord::new(x[a], self.aabb.min[a], self.aabb.max[a], self.n))
    }

    fn time_coord(&self, t: f64) -> GridCoord {
        GridCoord::new(t, self.time_range[0], self.time_range[1], self.t_res)
    }

    fn plane_value(&self, k: usize, ca: &GridCoord, cb: &GridCoord, r: usize) -> f64 {
        let p = &self.planes[k];
        let (n, rs) = (self.n, self.rank_s);
        let at = |i: usize, j: usize| p[(i * n + j) * rs + r];
        let (i, j, fa, fb) = (ca.i0, cb.i0, ca.frac, cb.frac);
        (1.0 - fa) * (1.0 - fb) * at(i, j) + fa * (1.0 - fb) * at(i + 1, j) + (1.0 - fa) * fb * at(i, j + 1) + fa * fb * at(i + 1, j + 1)
    }

    fn vector_value(&self, axis: usize, c: &GridCoord, r: usize) -> f64 {
        let v = &self.vectors[axis];
        (1.0 - c.frac) * v[c.i0 * self.rank_s + r] + c.frac * v[(c.i0 + 1) * self.rank_s + r]
    }

    /// Spatial features `s_r` and temporal features `u_q`.
    pub fn factors(&self, x: &[f64; 3], t: f64) -> (Vec<f64>, Vec<f64>) {
        let c = self.coords(x);
        let s = (0..self.rank_s)
            .map(|r| {
                PLANE_AXES
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, b, v))| self.plane_value(k, &c[a], &c[b], r) * self.vector_value(v, &c[v], r))
                    .sum()
            })
            .collect();
        let ct = self.time_coord(t);
        let u = (0..self.rank_t)
            .map(|q| (1.0 - ct.frac) * self.temporal[ct.i0 * self.rank_t + q] + ct.frac * self.temporal[(ct.i0 + 1) * self.rank_t + q])
            .collect();
        (s, u)
    }

    pub fn encode(&self, x: &[f64; 3], t: f64) -> Vec<f64> {
        let (s, u) = self.factors(x, t);
        combine(self.combine, &s, &u)
    }

    /// Accumulates encoder gradients into `grads` and returns `d/dx`.
    pub fn backward(&self, x: &[f64; 3], t: f64, d_feat: &[f64], grads: &mut FactorizedEncoder) -> [f64; 3] {
        let (s, u) = self.factors(x, t);
        let (d_s, d_u) = split_combine_grad(self.combine, &s, &u, d_feat);
        let c = self.coords(x);
        let (n, rs) = (self.n, self.rank_s);
        let mut d_x = [0.0; 3];
        for (k, &(a, b, va)) in PLANE_AXES.iter().enumerate() {
            let (ca, cb, cv) = (c[a], c[b], c[va]);
            let (i, j) = (ca.i0, cb.i0);
            let (fa, fb, fv) = (ca.frac, cb.frac, cv.frac);
            let plane = &self.planes[k];
            let vec = &self.vectors[va];
            for r in 0..rs {
                let ds = d_s[r];
                if ds == 0.0 {
                    continue;
                }
                let p = self.plane_value(k, &ca, &cb, r);
                let v = self.vector_value(va, &cv, r);
                let gp = &mut grads.planes[k];
                gp[(i * n + j) * rs + r] += (1.0 - fa) * (1.0 - fb) * v * ds;
                gp[((i + 1) * n + j) * rs + r] += fa * (1.0 - fb) * v * ds;
                gp[(i * n + j + 1) * rs + r] += (1.0 - fa) * fb * v * ds;
                gp[((i + 1) * n + j + 1) * rs + r] += fa * fb * v * ds;
                let gv = &mut grads.vectors[va];
                gv[cv.i0 * rs + r] += (1.0 - fv) * p * ds;
                gv[(cv.i0 + 1) * rs + r] += fv * p * ds;

                let at = |ii: usize, jj: usize| plane[(ii * n + jj) * rs + r];
                let dp_da = (1.0 - fb) * (at(i + 1, j) - at(i, j)) + fb * (at(i + 1, j + 1) - at(i, j + 1));
                let dp_db = (1.0 - fa) * (at(i, j + 1) - at(i, j)) + fa * (at(i + 1, j + 1) - at(i + 1, j));
                let dv = vec[(cv.i0 + 1) * rs + r] - vec[cv.i0 * rs + r];
                d_x[a] += ds * v * dp_da * ca.slope;
                d_x[b] += ds * v * dp_db * cb.slope;
                d_x[va] += ds * p * dv * cv.slope;
            }
        }
        let ct = self.time_coord(t);
        for q in 0..self.rank_t {
            grads.temporal[ct.i0 * self.rank_t + q] += (1.0 - ct.frac) * d_u[q];
            grads.temporal[(ct.i0 + 1) * self.rank_t + q] += ct.frac * d_u[q];
        }
        d_x
    }

    /// Mean squared difference between adjacent entries, taken per plane
    /// (both axes), per spatial vector and for the temporal vector, then
    /// summed over those seven grids. Per-grid means keep the term on the
    /// same per-element footing as the mean photometric loss.
    pub fn tv_loss(&self) -> f64 {
        self.tv(None)
    }

    /// [`Self::tv_loss`], accumulating `weight ×` its gradient into `grads`.
    pub fn tv_backward(&self, grads: &mut FactorizedEncoder, weight: f64) -> f64 {
        self.tv(Some((grads, weight)))
    }

    fn tv(&self, mut grads: Option<(&mut FactorizedEncoder, f64)>) -> f64 {
        let (n, rs) = (self.n, self.rank_s);
        let mut loss = 0.0;
        for k in 0..3 {
            let w = grads.as_mut().map(|(g, w)| (g.planes[k].as_mut_slice(), *w));
            loss += tv_grid(&self.planes[k], w, n, n, rs);
            let w = grads.as_mut().map(|(g, w)| (g.vectors[k].as_mut_slice(), *w));
            loss += tv_grid(&self.vectors[k], w, n, 1, rs);
        }
        let w = grads.as_mut().map(|(g, w)| (g.temporal.as_mut_slice(), *w));
        loss + tv_grid(&self.temporal, w, self.t_res, 1, self.rank_t)
    }
}

/// Mean TV of a `rows × cols × channels` grid.
fn tv_grid(src: &[f64], mut grad: Option<(&mut [f64], f64)>, rows: usize, cols: usize, channels: usize) -> f64 {
    let pairs = ((rows - 1) * cols + rows * (cols - 1)) * channels;
    if pairs == 0 {
        return 0.0;
    }
    let inv = 1.0 / pairs as f64;
    let mut loss = 0.0;
    let mut pair = |a: usize, b: usize| {
        let d = src[b] - src[a];
        if let Some((g, w)) = grad.as_mut() {
            g[b] += 2.0 * d * *w * inv;
            g[a] -= 2.0 * d * *w * inv;
        }
        loss += d * d;
    };
    for i in 0..rows {
        for j in 0..cols {
            for c in 0..channels {
                let here = (i * cols + j) * channels + c;
                if i + 1 < rows {
                    pair(here, here + cols * channels);
                }
                if j + 1 < cols {
                    pair(here, here + channels);
                }
            }
        }
    }
    loss * inv
}

fn combine(mode: Combine, s: &[f64], u: &[f64]) -> Vec<f64> {
    match mode {
        Combine::Concat => s.iter().chain(u).copied().collect(),
        Combine::Outer => s.iter().flat_map(|a| u.iter().map(move |b| a * b)).collect(),
    }
}

fn split_combine_grad(mode: Combine, s: &[f64], u: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match mode {
        Combine::Concat => (d[..s.len()].to_vec(), d[s.len()..].to_vec()),
        Combine::Outer => {
            let rt = u.len();
            let d_s = (0..s.len()).map(|r| (0..rt).map(|q| d[r * rt + q] * u[q]).sum()).collect();
            let d_u = (0..rt).map(|q| (0..s.len()).map(|r| d[r * rt + q] * s[r]).sum()).collect();
            (d_s, d_u)
        }
    }
}

/// Sinusoidal encoding of the normalized mean and time, no parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitEncoder {
    pub frequencies: usize,
    pub aabb: Aabb,
    pub time_range: [f64; 2],
}

impl ImplicitEncoder {
    pub fn output_dim(&self) -> usize {
        4 * (1 + 2 * self.frequencies)
    }

    fn normalized(&self, x: &[f64; 3], t: f64) -> ([f64; 4], [f64; 4]) {
        let mut p = [0.0; 4];
        let mut slope = [0.0; 4];
        for a in 0..4 {
            let (v, lo, hi) = if a < 3 { (x[a], self.aabb.min[a], self.aabb.max[a]) } else { (t, self.time_range[0], self.time_range[1]) };
            let c = GridCoord::new(v, lo, hi, 2);
            p[a] = c.i0 as f64 + c.frac;
            slope[a] = c.slope;
        }
        (p, slope)
    }

    pub fn encode(&self, x: &[f64; 3], t: f64) -> Vec<f64> {
        let (p, _) = self.normalized(x, t);
        let mut out = Vec::with_capacity(self.output_dim());
        for v in p {
            out.push(v);
            for k in 0..self.frequencies {
                let w = std::f64::consts::PI * (1u64 << k) as f64;
                out.push((w * v).sin());
                out.push((w * v).cos());
            }
        }
        out
    }

    /// `d/dx` given feature gradients.
    pub fn backward(&self, x: &[f64; 3], t: f64, d_feat: &[f64]) -> [f64; 3] {
        let (p, slope) = self.normalized(x, t);
        let stride = 1 + 2 * self.frequencies;
        let mut d_x = [0.0; 3];
        for a in 0..3 {
            let d = &d_feat[a * stride..(a + 1) * stride];
            let mut acc = d[0];
            for k in 0..self.frequencies {
                let w = std::f64::consts::PI * (1u64 << k) as f64;
                acc += d[1 + 2 * k] * w * (w * p[a]).cos() - d[2 + 2 * k] * w * (w * p[a]).sin();
            }
            d_x[a] = acc * slope[a];
        }
        d_x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb {
        Aabb::new([0.0; 3], [1.0; 3])
    }

    #[test]
    fn all_ones_gives_three() {
        let mut e = FactorizedEncoder::zeros(4, 3, 1, 1, Combine::Concat, unit_box(), [0.0, 1.0]);
        for s in e.param_slices_mut() {
            s.fill(1.0);
        }
        for x in [[0.1, 0.5, 0.9], [0.0, 0.0, 0.0], [0.77, 0.31, 0.42]] {
            assert_eq!(e.encode(&x, 0.3)[0], 3.0);
        }
    }

    #[test]
    fn clamps_outside_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = FactorizedEncoder::random(5, 4, 2, 2, Combine::Concat, unit_box(), [0.0, 1.0], 0.1, &mut rng);
        assert_eq!(e.encode(&[1.7, -0.3, 0.4], 1.5), e.encode(&[1.0, 0.0, 0.4], 1.0));
    }

    #[test]
    fn grid_coordinate_hits_nodes_exactly() {
        let aabb = Aabb::new([-1.05, -1.05, -1.05], [1.05, 1.05, 1.05]);
        for n in [4, 7, 64] {
            for k in 0..n {
                let x = aabb.min[0] + k as f64 * (aabb.max[0] - aabb.min[0]) / (n - 1) as f64;
                let c = GridCoord::new(x, aabb.min[0], aabb.max[0], n);
                let g = c.i0 as f64 + c.frac;
                assert!((g - k as f64).abs() < 1e-12, "n={n} k={k} g={g}");
            }
        }
    }

    #[test]
    fn tv_hand_cases() {
        let mut e = FactorizedEncoder::zeros(2, 2, 1, 1, Combine::Concat, unit_box(), [0.0, 1.0]);
        assert_eq!(e.tv_loss(), 0.0);
        e.vectors[0] = vec![0.0, 1.0];
        assert_eq!(e.tv_loss(), 1.0);
        e.vectors[0] = vec![0.0, 0.0];
        // Four adjacent pairs with squared differences 4, 4, 1, 1.
        e.planes[0] = vec![0.0, 1.0, 2.0, 3.0];
        assert_eq!(e.tv_loss(), 2.5);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut e = FactorizedEncoder::random(3, 3, 2, 2, Combine::Concat, unit_box(), [0.0, 1.0], 1.0, &mut rng);
        let mut g = e.zeros_like();
        e.tv_backward(&mut g, 1.0);
        let gflat: Vec<f64> = g.param_slices().concat();
        let eps = 1e-6;
        let mut idx = 0;
        for s in 0..7 {
            let len = e.param_slices()[s].len();
            for i in 0..len {
                let orig = e.param_slices()[s][i];
                e.param_slices_mut()[s][i] = orig + eps;
                let lp = e.tv_loss();
                e.param_slices_mut()[s][i] = orig - eps;
                let lm = e.tv_loss();
                e.param_slices_mut()[s][i] = orig;
                assert!((gflat[idx] - (lp - lm) / (2.0 * eps)).abs() < 1e-6);
                idx += 1;
            }
        }
    }

    #[test]
    fn plane_node_gradient_is_weight_times_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = FactorizedEncoder::random(4, 3, 1, 1, Combine::Concat, unit_box(), [0.0, 1.0], 1.0, &mut rng);
        let x = [0.2, 0.5, 0.9];
        let mut g = e.zeros_like();
        e.backward(&x, 0.0, &[1.0, 0.0], &mut g);
        // XY plane cell (0, 1): u = 0.6 → i0 0, frac 0.6; v = 1.5 → i0 1, frac 0.5.
        let vz = {
            let gz = 0.9 * 3.0;
            let f = gz - 2.0;
            (1.0 - f) * e.vectors[2][2] + f * e.vectors[2][3]
        };
        let w = (1.0 - 0.6) * (1.0 - 0.5);
        assert!((g.planes[0][1] - w * vz).abs() < 1e-12);
    }

    fn fd_check(combine: Combine) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let aabb = Aabb::new([-1.0, -0.5, -2.0], [1.0, 1.5, 0.5]);
        let mut e = FactorizedEncoder::random(4, 3, 2, 1, combine, aabb, [0.0, 1.0], 1.0, &mut rng);
        let x = [0.13, 0.71, -1.2];
        let t = 0.37;
        let w: Vec<f64> = (0..e.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |e: &FactorizedEncoder, x: &[f64; 3]| -> f64 { e.encode(x, t).iter().zip(&w).map(|(a, b)| a * b).sum() };
        let mut g = e.zeros_like();
        let dx = e.backward(&x, t, &w, &mut g);
        let eps = 1e-6;
        let gflat: Vec<f64> = g.param_slices().concat();
        let mut idx = 0;
        for s in 0..7 {
            let len = e.param_slices()[s].len();
            for i in 0..len {
                let orig = e.param_slices()[s][i];
                e.param_slices_mut()[s][i] = orig + eps;
                let lp = loss(&e, &x);
                e.param_slices_mut()[s][i] = orig - eps;
                let lm = loss(&e, &x);
                e.param_slices_mut()[s][i] = orig;
                assert!((gflat[idx] - (lp - lm) / (2.0 * eps)).abs() < 1e-7);
                idx += 1;
            }
        }
        for a in 0..3 {
            let (mut xp, mut xm) = (x, x);
            xp[a] += eps;
            xm[a] -= eps;
            let fd = (loss(&e, &xp) - loss(&e, &xm)) / (2.0 * eps);
            assert!((dx[a] - fd).abs() < 1e-6 * fd.abs().max(1.0), "axis {a}: {} vs {fd}", dx[a]);
        }
    }

    #[test]
    fn concat_backward_matches_finite_differences() {
        fd_check(Combine::Concat);
    }

    #[test]
    fn outer_backward_matches_finite_differences() {
        fd_check(Combine::Outer);
    }

    #[test]
    fn implicit_backward_matches_finite_differences() {
        let e = ImplicitEncoder {
            frequencies: 4,
            aabb: Aabb::new([-1.0; 3], [1.0; 3]),
            time_range: [0.0, 1.0],
        };
        let x = [0.3, -0.45, 0.8];
        let w: Vec<f64> = (0..e.output_dim()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let dx = e.backward(&x, 0.4, &w);
        let eps = 1e-6;
        for a in 0..3 {
            let (mut xp, mut xm) = (x, x);
            xp[a] += eps;
            xm[a] -= eps;
            let f = |x: &[f64; 3]| -> f64 { e.encode(x, 0.4).iter().zip(&w).map(|(a, b)| a * b).sum() };
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((dx[a] - fd).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn parameter_count_is_factorized() {
        let e = FactorizedEncoder::zeros(64, 64, 16, 8, Combine::Concat, unit_box(), [0.0, 1.0]);
        assert_eq!(e.param_count(), 3 * 64 * 64 * 16 + 3 * 64 * 16 + 64 * 8);
        assert_eq!(e.param_slices().iter().map(|s| s.len()).sum::<usize>(), e.param_count());
        assert!(e.param_count() < 64usize.pow(3) * 64);
    }
}
