//! Scale-conditioned affinity field: a small MLP from (encoded mean, 3D
//! mask scale) to a unit feature, trained contrastively against 2D masks.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::masks::MaskSet;
use crate::error::{Error, Result};
use crate::loss::{contrastive_loss, sample_pairs, PixelPair};
use crate::nn::Mlp;
use crate::optim::Adam;
use crate::raster::{render, render_backward, Frame, Payload, RenderSettings};
use crate::scene::{Aabb, Camera, GaussianSet};

/// Norms below this are treated as zero when normalizing features.
const NORM_EPS: f64 = 1e-12;
/// Pixels with less accumulated alpha than this cannot be clicked.
pub const CLICK_ALPHA_MIN: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.75;
const QUERY_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinityConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub feature_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub frequencies: usize,
    pub seed: u64,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            iterations: 5000,
            batch: 8192,
            lr: 1e-3,
            feature_dim: 16,
            hidden: 128,
            hidden_layers: 3,
            frequencies: 4,
            seed: 0,
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("affinity network sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("affinity lr must be positive, got {}", self.lr)));
        }
        if self.batch < 2 {
            return Err(Error::Config("affinity batch must hold at least one pair".into()));
        }
        Ok(())
    }
}

/// Input width for `frequencies` octaves: position, its sines and cosines,
/// and the scale.
pub fn input_dim(frequencies: usize) -> usize {
    3 + 6 * frequencies + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityField {
    pub mlp: Mlp,
    /// Box mapped to `[-1, 1]³` before encoding.
    pub aabb: Aabb,
    pub frequencies: usize,
    /// Timestep the supervision was rendered at.
    pub time: f64,
}

impl AffinityField {
    pub fn new(aabb: Aabb, time: f64, config: &AffinityConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut sizes = vec![input_dim(config.frequencies)];
        sizes.extend(std::iter::repeat(config.hidden).take(config.hidden_layers));
        sizes.push(config.feature_dim);
        Ok(AffinityField {
            mlp: Mlp::new(&sizes, false, &mut rng),
            aabb,
            frequencies: config.frequencies,
            time,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Encoded inputs, one row per mean.
    pub fn encode(&self, means: &[[f64; 3]], scale: f64) -> Array2<f64> {
        let width = input_dim(self.frequencies);
        let (c, e) = (self.aabb.center(), self.aabb.extent());
        let mut x = Array2::zeros((means.len(), width));
        for (row, m) in x.axis_iter_mut(Axis(0)).zip(means) {
            let row = row.into_slice().expect("standard layout");
            let mut k = 0;
            let p: [f64; 3] = std::array::from_fn(|a| if e[a] > 0.0 { 2.0 * (m[a] - c[a]) / e[a] } else { 0.0 });
            row[..3].copy_from_slice(&p);
            k += 3;
            for f in 0..self.frequencies {
                let w = std::f64::consts::PI * (1u64 << f) as f64;
                for v in p {
                    row[k] = (w * v).sin();
                    row[k + 1] = (w * v).cos();
                    k += 2;
                }
            }
            row[k] = scale;
        }
        x
    }

    /// Unit features for `means` at one scale, `len × feature_dim`.
    pub fn query(&self, means: &[[f64; 3]], scale: f64) -> Array2<f64> {
        let dim = self.feature_dim();
        let chunks: Vec<Array2<f64>> = means
            .par_chunks(QUERY_CHUNK)
            .map(|chunk| {
                let mut out = self.mlp.forward(self.encode(chunk, scale).view()).output;
                normalize_rows(&mut out);
                out
            })
            .collect();
        let mut all = Array2::zeros((0, dim));
        for c in chunks {
            all.append(Axis(0), c.view()).expect("matching widths");
        }
        all
    }

    /// Features at each scale; `result[s]` is `len × feature_dim`.
    pub fn multiscale_query(&self, means: &[[f64; 3]], scales: &[f64]) -> Vec<Array2<f64>> {
        scales.iter().map(|&s| self.query(means, s)).collect()
    }

    /// Renders the features of `set` at `scale` through `camera`.
    pub fn render_features(&self, set: &GaussianSet, camera: &Camera, scale: f64, settings: &RenderSettings) -> Frame {
        let feats = self.query(&set.means, scale);
        let flat = feats.as_slice().expect("standard layout");
        render(
            set,
            camera,
            Payload::Channels {
                values: flat,
                channels: self.feature_dim(),
            },
            settings,
            false,
        )
    }

    /// Contrastive loss of the rendered features over `pairs` and its
    /// gradient with respect to the network parameters.
    pub fn loss_grad(
        &self,
        set: &GaussianSet,
        camera: &Camera,
        scale: f64,
        pairs: &[PixelPair],
        settings: &RenderSettings,
    ) -> (f64, Mlp) {
        let dim = self.feature_dim();
        let cache = self.mlp.forward(self.encode(&set.means, scale).view());
        let mut feats = cache.output.clone();
        let norms = normalize_rows(&mut feats);
        let flat = feats.as_slice().expect("standard layout");
        let frame = render(set, camera, Payload::Channels { values: flat, channels: dim }, settings, false);
        let (loss, d_image) = contrastive_loss(&frame.output.image, dim, pairs);
        let grads = render_backward(set, camera, &frame, &d_image);
        let d_feat = ArrayView2::from_shape((set.len(), dim), &grads.payload).expect("payload rows");
        let d_raw = normalize_backward(&feats, &norms, d_feat);
        let (g, _) = self.mlp.backward(&cache, d_raw.view());
        (loss, g)
    }
}

/// Normalizes rows in place and returns the original norms.
fn normalize_rows(x: &mut Array2<f64>) -> Vec<f64> {
    x.axis_iter_mut(Axis(0))
        .map(|mut row| {
            let n = row.dot(&row).sqrt();
            if n > NORM_EPS {
                row /= n;
            }
            n
        })
        .collect()
}

/// Gradient through `f = r/|r|`: `(g − f (f·g)) / |r|`.
fn normalize_backward(f: &Array2<f64>, norms: &[f64], g: ArrayView2<f64>) -> Array2<f64> {
    let mut out = g.to_owned();
    for ((mut o, fr), &n) in out.axis_iter_mut(Axis(0)).zip(f.axis_iter(Axis(0))).zip(norms) {
        if n > NORM_EPS {
            let proj = fr.dot(&o);
            o.zip_mut_with(&fr, |d, &fv| *d = (*d - fv * proj) / n);
        } else {
            o.fill(0.0);
        }
    }
    out
}

/// Pixel labels for training at the scale of mask `context` in one view: a
/// pixel takes the largest-scale mask covering it among masks no coarser than
/// the context (ties to the lower index); uncovered pixels are background.
pub fn context_labels(masks: &[super::masks::ScaledMask], context: usize) -> Vec<Option<u32>> {
    let s = masks[context].scale;
    let n = masks[context].mask.data.len();
    let mut best: Vec<Option<(f64, u32)>> = vec![None; n];
    for (m, sm) in masks.iter().enumerate() {
        if sm.scale > s {
            continue;
        }
        for (p, &inside) in sm.mask.data.iter().enumerate() {
            if inside && best[p].is_none_or(|(bs, _)| sm.scale > bs) {
                best[p] = Some((sm.scale, m as u32));
            }
        }
    }
    best.into_iter().map(|b| b.map(|(_, m)| m)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityProgress {
    pub iteration: usize,
    pub loss: f64,
}

/// Trains a field on `masks`. `set` holds the segment's Gaussians deformed to
/// `masks.time` and is not modified. `on_iter` sees every iteration.
pub fn train_affinity(
    masks: &MaskSet,
    set: &GaussianSet,
    aabb: Aabb,
    config: &AffinityConfig,
    settings: &RenderSettings,
    mut on_iter: impl FnMut(AffinityProgress),
) -> Result<AffinityField> {
    let mut field = AffinityField::new(aabb, masks.time, config)?;
    if masks.mask_count() == 0 {
        return Err(Error::NoSupervision);
    }
    let contexts: Vec<Vec<Vec<Option<u32>>>> = masks
        .views
        .iter()
        .map(|v| (0..v.masks.len()).map(|m| context_labels(&v.masks, m)).collect())
        .collect();
    let views: Vec<usize> = (0..masks.views.len()).filter(|&v| !masks.views[v].masks.is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut adam = Adam::new(field.mlp.param_count(), config.lr);
    for iteration in 0..config.iterations {
        let v = views[rng.gen_range(0..views.len())];
        let view = &masks.views[v];
        let m = rng.gen_range(0..view.masks.len());
        let pairs = sample_pairs(&contexts[v][m], config.batch, &mut rng);
        let (loss, grads) = field.loss_grad(set, &view.camera, view.masks[m].scale, &pairs, settings);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss,
                iteration,
                stage: "affinity",
            });
        }
        adam.update(field.mlp.param_slices_mut(), grads.param_slices());
        on_iter(AffinityProgress { iteration, loss });
    }
    Ok(field)
}

/// Result of a fine-level click.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineSegment {
    pub parent: usize,
    /// Ascending Gaussian ids, a subset of the parent's.
    pub ids: Vec<u64>,
    pub scale: f64,
    pub tau: f64,
}

/// Selects the Gaussians of `parent_set` (the coarse parent deformed to
/// `field.time`) whose feature at `scale` has cosine similarity above `tau`
/// with the feature rendered at pixel `(x, y)`. `None` on an empty pixel.
#[allow(clippy::too_many_arguments)]
pub fn segment_by_click(
    field: &AffinityField,
    parent: usize,
    parent_set: &GaussianSet,
    camera: &Camera,
    x: usize,
    y: usize,
    scale: f64,
    tau: f64,
    settings: &RenderSettings,
) -> Option<FineSegment> {
    if x >= camera.width || y >= camera.height || parent_set.is_empty() {
        return None;
    }
    let dim = field.feature_dim();
    let feats = field.query(&parent_set.means, scale);
    let frame = render(
        parent_set,
        camera,
        Payload::Channels {
            values: feats.as_slice().expect("standard layout"),
            channels: dim,
        },
        settings,
        false,
    );
    let p = y * camera.width + x;
    if frame.output.alpha[p] < CLICK_ALPHA_MIN {
        return None;
    }
    let reference = &frame.output.image[p * dim..(p + 1) * dim];
    let rn = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rn <= NORM_EPS {
        return None;
    }
    let mut ids: Vec<u64> = feats
        .axis_iter(Axis(0))
        .zip(&parent_set.ids)
        .filter(|(f, _)| f.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>() / rn > tau)
        .map(|(_, &id)| id)
        .collect();
    ids.sort_unstable();
    Some(FineSegment { parent, ids, scale, tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Mask;
    use crate::scene::{logit, Gaussian};
    use crate::segment::masks::{ScaledMask, ViewMasks};
    use nalgebra::Vector3;

    fn small_config(iterations: usize) -> AffinityConfig {
        AffinityConfig {
            iterations,
            batch: 512,
            hidden: 32,
            hidden_layers: 2,
            feature_dim: 8,
            ..Default::default()
        }
    }

    fn two_clusters() -> GaussianSet {
        let mut s = GaussianSet::new(0);
        let mut id = 0;
        for cx in [-0.6, 0.6] {
            for k in 0..4 {
                let dz = -0.15 + 0.1 * k as f64;
                s.push(Gaussian {
                    id,
                    mean: [cx, 0.0, dz],
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    log_scale: [0.12f64.ln(); 3],
                    sh: vec![0.0; 3],
                    opacity_logit: logit(0.8),
                });
                id += 1;
            }
        }
        s
    }

    fn cam() -> Camera {
        Camera::look_at(Vector3::new(0.0, -4.0, 0.0), Vector3::zeros(), Vector3::z(), 0.7, 24, 24).unwrap()
    }

    fn aabb() -> Aabb {
        Aabb::new([-1.0; 3], [1.0; 3])
    }

    fn halves() -> MaskSet {
        let mask = |left: bool| ScaledMask {
            mask: Mask::from_fn(24, 24, move |x, _| (x < 12) == left),
            confidence: 1.0,
            scale: 0.05,
        };
        MaskSet {
            time: 0.5,
            views: vec![ViewMasks {
                view: 0,
                camera: cam(),
                masks: vec![mask(true), mask(false)],
            }],
        }
    }

    #[test]
    fn input_dim_matches_encoding() {
        assert_eq!(input_dim(4), 28);
        let f = AffinityField::new(aabb(), 0.0, &AffinityConfig::default()).unwrap();
        let x = f.encode(&[[1.0, -1.0, 0.0]], 0.3);
        assert_eq!(x.shape(), &[1, 28]);
        assert_eq!(&x.row(0).to_vec()[..3], &[1.0, -1.0, 0.0]);
        assert_eq!(x[[0, 27]], 0.3);
        // Lowest octave: sin(π·1), cos(π·1).
        assert!((x[[0, 3]] - 0.0).abs() < 1e-15 && (x[[0, 4]] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn queries_are_unit_and_deterministic() {
        let f = AffinityField::new(aabb(), 0.0, &AffinityConfig::default()).unwrap();
        let means: Vec<[f64; 3]> = (0..600).map(|i| [i as f64 / 600.0, 0.1, -0.2]).collect();
        let a = f.query(&means, 0.2);
        let b = f.query(&means, 0.2);
        assert_eq!(a, b);
        for row in a.axis_iter(Axis(0)) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let ms = f.multiscale_query(&means[..3], &[0.1, 0.2]);
        assert_eq!(ms[1], a.slice(ndarray::s![..3, ..]).to_owned());
    }

    #[test]
    fn context_labels_respect_scale() {
        let m = |x0: usize, x1: usize, scale: f64| ScaledMask {
            mask: Mask::from_fn(6, 1, move |x, _| x >= x0 && x < x1),
            confidence: 1.0,
            scale,
        };
        let masks = [m(0, 2, 0.1), m(2, 4, 0.1), m(0, 4, 0.5)];
        assert_eq!(context_labels(&masks, 0), vec![Some(0), Some(0), Some(1), Some(1), None, None]);
        assert_eq!(context_labels(&masks, 2), vec![Some(2); 4].into_iter().chain([None, None]).collect::<Vec<_>>());
    }

    #[test]
    fn normalization_backward_matches_differences() {
        let mut r = Array2::from_shape_vec((1, 3), vec![0.3, -1.2, 0.5]).unwrap();
        let raw = r.clone();
        let norms = normalize_rows(&mut r);
        let g = Array2::from_shape_vec((1, 3), vec![0.7, 0.1, -0.4]).unwrap();
        let d = normalize_backward(&r, &norms, g.view());
        let objective = |v: &Array2<f64>| {
            let mut v = v.clone();
            normalize_rows(&mut v);
            (&v * &g).sum()
        };
        for a in 0..3 {
            let h = 1e-6;
            let (mut p, mut m) = (raw.clone(), raw.clone());
            p[[0, a]] += h;
            m[[0, a]] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - d[[0, a]]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_iterations_returns_initial_field() {
        let cfg = small_config(0);
        let f = train_affinity(&halves(), &two_clusters(), aabb(), &cfg, &RenderSettings::default(), |_| {}).unwrap();
        assert_eq!(f, AffinityField::new(aabb(), 0.5, &cfg).unwrap());
    }

    #[test]
    fn single_covering_mask_gives_zero_loss() {
        let f = AffinityField::new(aabb(), 0.0, &small_config(0)).unwrap();
        // Pixel pairs across and within both clusters, all covered by splats.
        let px = |x: usize, y: usize| y * 24 + x;
        let pairs: Vec<PixelPair> = [(7, 12, 17, 12), (7, 10, 7, 13), (17, 11, 16, 13)]
            .iter()
            .map(|&(a, b, c, d)| PixelPair { i: px(a, b), j: px(c, d), same: true })
            .collect();
        // Constant features: every same pair is already aligned.
        let mut f0 = f.clone();
        let last = f0.mlp.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(1.0);
        let (loss, _) = f0.loss_grad(&two_clusters(), &cam(), 0.1, &pairs, &RenderSettings::default());
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn training_separates_two_clusters() {
        let set = two_clusters();
        let cfg = small_config(150);
        let mut losses = Vec::new();
        let f = train_affinity(&halves(), &set, aabb(), &cfg, &RenderSettings::default(), |p| losses.push(p.loss)).unwrap();
        assert_eq!(losses.len(), 150);
        let feats = f.query(&set.means, 0.05);
        let cos = |a: usize, b: usize| feats.row(a).dot(&feats.row(b));
        assert!(cos(0, 3) > 0.9 && cos(4, 7) > 0.9, "within {} {}", cos(0, 3), cos(4, 7));
        assert!(cos(0, 4) < 0.3, "across {}", cos(0, 4));

        let left = segment_by_click(&f, 1, &set, &cam(), 6, 12, 0.05, DEFAULT_TAU, &RenderSettings::default()).unwrap();
        assert_eq!(left.ids, vec![0, 1, 2, 3]);
        let all = segment_by_click(&f, 1, &set, &cam(), 6, 12, 0.05, -1.0, &RenderSettings::default()).unwrap();
        assert_eq!(all.ids.len(), 8);
        let none = segment_by_click(&f, 1, &set, &cam(), 6, 12, 0.05, 1.0 + 1e-9, &RenderSettings::default()).unwrap();
        assert!(none.ids.is_empty());
        assert!(segment_by_click(&f, 1, &set, &cam(), 12, 0, 0.05, DEFAULT_TAU, &RenderSettings::default()).is_none());
    }

    #[test]
    fn training_leaves_the_set_untouched() {
        let set = two_clusters();
        let before = set.clone();
        train_affinity(&halves(), &set, aabb(), &small_config(3), &RenderSettings::default(), |_| {}).unwrap();
        assert_eq!(set, before);
    }
}
