//! Initial Gaussians for scenes without a point cloud.

use rand::Rng;
use rayon::prelude::*;

use crate::scene::{logit, sh, Aabb, Gaussian, GaussianSet};

/// Mean distance from each point to its nearest neighbour; 0 for fewer than
/// two points.
pub fn mean_nearest_neighbor_distance(points: &[[f64; 3]]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let nearest: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    nearest.iter().sum::<f64>() / nearest.len() as f64
}

/// `count` gray, isotropic Gaussians with means uniform in `aabb` and a
/// common scale equal to the mean nearest-neighbour spacing.
pub fn random_init(count: usize, aabb: &Aabb, sh_degree: usize, opacity: f64, rng: &mut impl Rng) -> GaussianSet {
    let means: Vec<[f64; 3]> = (0..count)
        .map(|_| std::array::from_fn(|a| rng.gen_range(aabb.min[a]..aabb.max[a])))
        .collect();
    let spacing = mean_nearest_neighbor_distance(&means);
    let log_scale = if spacing > 0.0 { spacing.ln() } else { (0.01 * aabb.diagonal()).ln() };
    let mut set = GaussianSet::new(sh_degree);
    let coeffs = set.coeffs_per_gaussian();
    for (id, mean) in means.into_iter().enumerate() {
        let mut shc = vec![0.0; coeffs];
        for c in 0..3 {
            shc[c] = sh::rgb_to_dc(0.5);
        }
        set.push(Gaussian {
            id: id as u64,
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [log_scale; 3],
            sh: shc,
            opacity_logit: logit(opacity),
        });
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_neighbor_on_a_line() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        // Nearest distances 1, 1, 2.
        assert!((mean_nearest_neighbor_distance(&pts) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn init_is_inside_gray_and_translucent() {
        let aabb = Aabb::new([-1.0, -2.0, 0.0], [1.0, 0.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = random_init(300, &aabb, 2, 0.1, &mut rng);
        set.validate().unwrap();
        assert_eq!(set.len(), 300);
        for i in 0..set.len() {
            assert!(aabb.contains(&set.means[i]));
            assert!((set.opacity(i) - 0.1).abs() < 1e-12);
            let c = sh::sh_to_rgb(2, set.sh_of(i), &nalgebra::Vector3::x());
            assert_eq!(c, [0.5; 3]);
        }
        let s = set.scale(0)[0];
        assert!((s - mean_nearest_neighbor_distance(&set.means)).abs() < 1e-12);
    }
}
