//! Emission-absorption ray marching of an [`AnalyticScene`].

use nalgebra::Vector3;
use rayon::prelude::*;

use super::scene::AnalyticScene;
use crate::image::{Image, Mask};
use crate::scene::Camera;

/// Steps per scene-box diagonal.
pub const STEPS_PER_DIAGONAL: f64 = 256.0;
/// Pixels with less total alpha are background in id maps.
pub const BACKGROUND_ALPHA: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct DvrOutput {
    pub image: Image,
    pub alpha: Vec<f64>,
    /// Per pixel, per blob contribution (blend weight), `H × W × blobs`.
    pub contributions: Vec<f64>,
    /// Index of the blob with the largest contribution, or `None` on background.
    pub dominant_blob: Vec<Option<usize>>,
    /// Leaf segment id of the dominant blob.
    pub segment_ids: Vec<Option<u32>>,
}

impl DvrOutput {
    /// Pixels whose total alpha reaches `threshold`.
    pub fn alpha_mask(&self, threshold: f64) -> Mask {
        Mask {
            width: self.image.width,
            height: self.image.height,
            data: self.alpha.iter().map(|&a| a >= threshold).collect(),
        }
    }
}

/// Ray parameter interval inside the box, if any.
fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, min: &[f64; 3], max: &[f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

/// Renders the scene at time `t`. Samples sit at step midpoints.
pub fn dvr_render(scene: &AnalyticScene, camera: &Camera, t: f64) -> DvrOutput {
    let (w, h) = (camera.width, camera.height);
    let nb = scene.blobs.len();
    let step = scene.aabb.diagonal() / STEPS_PER_DIAGONAL;
    let centers: Vec<Vector3<f64>> = scene.blobs.iter().map(|b| b.center(t)).collect();
    let radii: Vec<f64> = scene.blobs.iter().map(|b| b.radius_at(t)).collect();

    let pixels: Vec<([f64; 3], f64, Vec<f64>)> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let (x, y) = (p % w, p / w);
            let dir = camera.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            let o = camera.position;
            let mut color = [0.0; 3];
            let mut contrib = vec![0.0; nb];
            let mut trans = 1.0;
            // Blobs whose support the ray actually crosses.
            let hits: Vec<usize> = (0..nb)
                .filter(|&k| {
                    let oc = centers[k] - o;
                    let along = oc.dot(&dir);
                    (oc - dir * along).norm() < radii[k]
                })
                .collect();
            if !hits.is_empty() {
                if let Some((t0, t1)) = ray_box(&o, &dir, &scene.aabb.min, &scene.aabb.max) {
                    let n = ((t1 - t0) / step).ceil() as usize;
                    let mut sigma = vec![0.0; nb];
                    for i in 0..n {
                        let s = t0 + (i as f64 + 0.5) * step;
                        let pos = o + dir * s;
                        let mut total = 0.0;
                        for &k in &hits {
                            sigma[k] = scene.blobs[k].density(&pos, t);
                            total += sigma[k];
                        }
                        if total <= 0.0 {
                            continue;
                        }
                        let alpha = 1.0 - (-total * step).exp();
                        let mut shade = 1.0;
                        if scene.shading {
                            let grad: Vector3<f64> = hits.iter().map(|&k| scene.blobs[k].density_gradient(&pos, t)).sum();
                            let gn = grad.norm();
                            if gn > 0.0 {
                                shade = 0.3 + 0.7 * (grad.dot(&dir) / gn).abs();
                            }
                        }
                        let weight = trans * alpha;
                        for &k in &hits {
                            let share = weight * sigma[k] / total;
                            contrib[k] += share;
                            for c in 0..3 {
                                color[c] += share * scene.blobs[k].color[c] * shade;
                            }
                        }
                        trans *= 1.0 - alpha;
                    }
                }
            }
            (color, 1.0 - trans, contrib)
        })
        .collect();

    let mut image = Image::new(w, h, 3);
    let mut alpha = vec![0.0; w * h];
    let mut contributions = vec![0.0; w * h * nb];
    let mut dominant_blob = vec![None; w * h];
    let mut segment_ids = vec![None; w * h];
    for (p, (color, a, contrib)) in pixels.into_iter().enumerate() {
        image.data[p * 3..p * 3 + 3].copy_from_slice(&color);
        alpha[p] = a;
        if a >= BACKGROUND_ALPHA {
            let mut best = 0;
            for k in 1..nb {
                if contrib[k] > contrib[best] {
                    best = k;
                }
            }
            dominant_blob[p] = Some(best);
            segment_ids[p] = Some(scene.blobs[best].segment);
        }
        contributions[p * nb..(p + 1) * nb].copy_from_slice(&contrib);
    }
    DvrOutput {
        image,
        alpha,
        contributions,
        dominant_blob,
        segment_ids,
    }
}

/// Silhouette of the given blobs rendered alone: total alpha ≥ `threshold`.
pub fn isolated_mask(scene: &AnalyticScene, blobs: &[usize], camera: &Camera, t: f64, threshold: f64) -> Mask {
    dvr_render(&scene.subset(blobs), camera, t).alpha_mask(threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Aabb;
    use crate::synth::scene::Blob;

    fn ball(center: [f64; 3], r: f64, peak: f64, segment: u32) -> Blob {
        Blob {
            name: format!("b{segment}"),
            trajectory: [[center[0], 0.0, 0.0, 0.0], [center[1], 0.0, 0.0, 0.0], [center[2], 0.0, 0.0, 0.0]],
            radius: vec![r],
            color: [0.2, 0.6, 0.9],
            peak_density: peak,
            segment,
            parent: None,
        }
    }

    fn scene(blobs: Vec<Blob>) -> AnalyticScene {
        AnalyticScene {
            name: "test".into(),
            blobs,
            aabb: Aabb::new([-1.0; 3], [1.0; 3]),
            time_range: [0.0, 1.0],
            shading: false,
        }
    }

    fn camera(res: usize) -> Camera {
        Camera::look_at(Vector3::new(0.0, -3.5, 0.0), Vector3::zeros(), Vector3::z(), 0.7, res, res).unwrap()
    }

    #[test]
    fn empty_scene_is_black_background() {
        let out = dvr_render(&scene(vec![]), &camera(8), 0.0);
        assert!(out.image.data.iter().all(|&v| v == 0.0));
        assert!(out.segment_ids.iter().all(Option::is_none));
    }

    #[test]
    fn central_ray_matches_closed_form() {
        // Even resolution: the central ray passes through pixel-corner, so use
        // an odd size to put a pixel center on the axis.
        let s = scene(vec![ball([0.0; 3], 0.5, 6.0, 0)]);
        let cam = camera(9);
        let out = dvr_render(&s, &cam, 0.0);
        let tau = s.blobs[0].chord_optical_depth(0.0, 0.0);
        let expected = 1.0 - (-tau).exp();
        assert!((out.alpha[4 * 9 + 4] - expected).abs() < 1e-3, "{} vs {expected}", out.alpha[4 * 9 + 4]);
        // Off-axis pixel: impact parameter from the ray's distance to the center.
        let dir = cam.ray_direction(6.5, 4.5);
        let oc = -cam.position;
        let b = (oc - dir * oc.dot(&dir)).norm() / 0.5;
        let expected = 1.0 - (-s.blobs[0].chord_optical_depth(b, 0.0)).exp();
        assert!((out.alpha[4 * 9 + 6] - expected).abs() < 1e-3);
    }

    #[test]
    fn opaque_blob_center_has_blob_color() {
        let s = scene(vec![ball([0.0; 3], 0.5, 200.0, 0)]);
        let out = dvr_render(&s, &camera(9), 0.0);
        let px = out.image.pixel(4, 4);
        for c in 0..3 {
            assert!((px[c] - s.blobs[0].color[c]).abs() <= 0.02 * s.blobs[0].color[c]);
        }
    }

    #[test]
    fn alpha_is_conserved() {
        let s = AnalyticScene::blobs3();
        let out = dvr_render(&s, &camera(24), 0.4);
        for p in 0..24 * 24 {
            let sum: f64 = out.contributions[p * 3..p * 3 + 3].iter().sum();
            assert!((sum + (1.0 - out.alpha[p]) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn disjoint_blobs_partition_by_silhouette() {
        let s = scene(vec![ball([-0.5, 0.0, 0.0], 0.3, 30.0, 0), ball([0.5, 0.0, 0.0], 0.3, 30.0, 1)]);
        let cam = camera(32);
        let out = dvr_render(&s, &cam, 0.0);
        for y in 0..32 {
            for x in 0..32 {
                let dir = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
                let inside = |k: usize| {
                    let oc = s.blobs[k].center(0.0) - cam.position;
                    (oc - dir * oc.dot(&dir)).norm() < 0.3
                };
                let id = out.segment_ids[y * 32 + x];
                if !inside(0) && !inside(1) {
                    assert_eq!(id, None);
                } else if out.alpha[y * 32 + x] >= BACKGROUND_ALPHA {
                    assert_eq!(id, Some(if inside(0) { 0 } else { 1 }));
                }
            }
        }
    }

    #[test]
    fn isolated_silhouettes_agree_with_id_map() {
        let s = AnalyticScene::blobs3();
        let cam = camera(48);
        let out = dvr_render(&s, &cam, 0.0);
        let red_id = Mask {
            width: 48,
            height: 48,
            data: out.segment_ids.iter().zip(&out.alpha).map(|(id, &a)| *id == Some(0) && a >= 0.5).collect(),
        };
        let red = isolated_mask(&s, &[0], &cam, 0.0, 0.5);
        assert!(crate::loss::mask_iou(&red, &red_id).unwrap() > 0.98);
    }
}
