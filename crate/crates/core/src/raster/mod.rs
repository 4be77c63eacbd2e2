//! Differentiable splatting of a [`GaussianSet`] through a [`Camera`].
//!
//! [`render`] projects every Gaussian, evaluates its payload (view-dependent
//! SH color or caller-supplied channels) and composites; [`render_backward`]
//! chains image gradients back to the Gaussian attributes and payload.

pub mod composite;
pub mod project;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::Mask;
use crate::scene::covariance::covariance_backward;
use crate::scene::{sh, Camera, GaussianSet};
pub use composite::{rasterize, rasterize_backward, RasterOutput, Splat, SplatGrads};
pub use project::{project, project_backward, Projection};

/// Compositing thresholds. The defaults follow common splatting practice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    /// Contributions below this alpha are skipped.
    pub alpha_min: f64,
    /// Per-splat alpha is clamped to this value.
    pub alpha_max: f64,
    /// Compositing stops before transmittance would fall below this.
    pub transmittance_min: f64,
    /// Culling radius in standard deviations of the 2D footprint.
    pub cull_sigma: f64,
    /// Added to the 2D covariance diagonal, pixel².
    pub dilation: f64,
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.99,
            transmittance_min: 1e-4,
            cull_sigma: 3.0,
            dilation: 0.3,
            tile_size: 16,
        }
    }
}

impl RenderSettings {
    /// No skip, clamp, early stop or culling: the image is a smooth function
    /// of every parameter. Used by finite-difference checks.
    pub fn exact() -> Self {
        RenderSettings {
            alpha_min: 0.0,
            alpha_max: 1.0,
            transmittance_min: 0.0,
            cull_sigma: f64::INFINITY,
            ..Default::default()
        }
    }
}

/// What each Gaussian contributes to the composited channels.
#[derive(Clone, Copy, Debug)]
pub enum Payload<'a> {
    /// View-dependent RGB from the SH coefficients.
    Color,
    /// `channels` values per Gaussian, in storage order.
    Channels { values: &'a [f64], channels: usize },
}

impl Payload<'_> {
    pub fn channels(&self) -> usize {
        match self {
            Payload::Color => 3,
            Payload::Channels { channels, .. } => *channels,
        }
    }
}

/// Forward state of one render, needed by [`render_backward`].
#[derive(Clone, Debug)]
pub struct Frame {
    pub output: RasterOutput,
    pub settings: RenderSettings,
    /// Storage index of the Gaussian behind each splat.
    pub gaussian_of: Vec<usize>,
    splats: Vec<Splat>,
    projections: Vec<Projection>,
    covariances: Vec<Matrix3<f64>>,
    payload: Vec<f64>,
    /// For color payloads: SH value before offset and clamp.
    raw_color: Vec<[f64; 3]>,
    color_payload: bool,
}

impl Frame {
    /// Id of the Gaussian with the largest blend weight at a pixel. Requires
    /// contributor lists.
    pub fn pick(&self, x: usize, y: usize) -> Option<u64> {
        if x >= self.output.width || y >= self.output.height {
            return None;
        }
        self.output.dominant(x, y)
    }

    /// Pixels whose accumulated alpha reaches `threshold`.
    pub fn alpha_mask(&self, threshold: f64) -> Mask {
        Mask {
            width: self.output.width,
            height: self.output.height,
            data: self.output.alpha.iter().map(|&a| a >= threshold).collect(),
        }
    }

    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }
}

struct Prepared {
    index: usize,
    splat: Splat,
    projection: Projection,
    covariance: Matrix3<f64>,
}

/// Renders `set` through `camera`.
pub fn render(
    set: &GaussianSet,
    camera: &Camera,
    payload: Payload<'_>,
    settings: &RenderSettings,
    keep_contributors: bool,
) -> Frame {
    let channels = payload.channels();
    if let Payload::Channels { values, channels } = payload {
        assert_eq!(values.len(), set.len() * channels, "payload length mismatch");
    }
    let prepared: Vec<Prepared> = (0..set.len())
        .into_par_iter()
        .filter_map(|i| {
            // Degenerate rotations are not drawable; they are skipped.
            let covariance = set.covariance(i).ok()?;
            let projection = project(&set.mean(i), &covariance, camera, settings)?;
            let splat = Splat {
                id: set.ids[i],
                mean2d: projection.mean2d,
                conic: projection.conic,
                opacity: set.opacity(i),
                depth: projection.depth,
                radius: projection.radius,
            };
            Some(Prepared {
                index: i,
                splat,
                projection,
                covariance,
            })
        })
        .collect();

    let mut gaussian_of = Vec::with_capacity(prepared.len());
    let mut splats = Vec::with_capacity(prepared.len());
    let mut projections = Vec::with_capacity(prepared.len());
    let mut covariances = Vec::with_capacity(prepared.len());
    for p in prepared {
        gaussian_of.push(p.index);
        splats.push(p.splat);
        projections.push(p.projection);
        covariances.push(p.covariance);
    }

    let mut raw_color = Vec::new();
    let values: Vec<f64> = match payload {
        Payload::Color => {
            raw_color = gaussian_of
                .iter()
                .map(|&i| {
                    let d = (set.mean(i) - camera.position).normalize();
                    let raw = sh::eval_sh(set.sh_degree, set.sh_of(i), &d);
                    raw.map(|v| v + sh::COLOR_OFFSET)
                })
                .collect();
            raw_color.iter().flat_map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect()
        }
        Payload::Channels { values, channels } => gaussian_of
            .iter()
            .flat_map(|&i| values[i * channels..(i + 1) * channels].iter().copied())
            .collect(),
    };

    let output = rasterize(&splats, &values, channels, camera.width, camera.height, settings, keep_contributors);
    Frame {
        output,
        settings: settings.clone(),
        gaussian_of,
        splats,
        projections,
        covariances,
        payload: values,
        raw_color,
        color_payload: matches!(payload, Payload::Color),
    }
}

/// Attribute gradients, laid out like the [`GaussianSet`] arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub means: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub sh: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    /// `len × channels`; zero for color renders.
    pub payload: Vec<f64>,
    /// Norm of the projected-mean gradient in normalized device units.
    pub screen_grad_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl GaussianGrads {
    pub fn zeros(set: &GaussianSet, channels: usize) -> Self {
        let n = set.len();
        GaussianGrads {
            means: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            sh: vec![0.0; set.sh.len()],
            opacity_logits: vec![0.0; n],
            payload: vec![0.0; n * channels],
            screen_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

/// Reverse pass of [`render`]; `d_image` has the layout of `frame.output.image`.
pub fn render_backward(set: &GaussianSet, camera: &Camera, frame: &Frame, d_image: &[f64]) -> GaussianGrads {
    let channels = frame.output.channels;
    let sg = rasterize_backward(&frame.splats, &frame.payload, &frame.output, d_image, &frame.settings);
    let mut grads = GaussianGrads::zeros(set, if frame.color_payload { 0 } else { channels });
    let (half_w, half_h) = (0.5 * camera.width as f64, 0.5 * camera.height as f64);
    let ncoef = sh::coeff_count(set.sh_degree);

    let per_splat: Vec<_> = (0..frame.splats.len())
        .into_par_iter()
        .map(|k| {
            let i = frame.gaussian_of[k];
            let (mut d_mean, d_cov) =
                project_backward(&frame.covariances[k], camera, &frame.projections[k], sg.mean2d[k], sg.conic[k]);
            let (d_rot, d_ls) = covariance_backward(set.rotations[i], set.log_scales[i], &d_cov)
                .expect("covariance succeeded in the forward pass");
            let mut d_sh = [0.0; 27];
            if frame.color_payload {
                let raw = frame.raw_color[k];
                let mut d_raw = [0.0; 3];
                for c in 0..3 {
                    if raw[c] > 0.0 && raw[c] < 1.0 {
                        d_raw[c] = sg.payload[k * 3 + c];
                    }
                }
                let v = set.mean(i) - camera.position;
                let norm = v.norm();
                let d = v / norm;
                let basis = sh::basis(set.sh_degree, &d);
                let coeffs = set.sh_of(i);
                let mut d_dir = Vector3::zeros();
                let basis_grad = if ncoef > 1 { Some(sh::basis_grad(set.sh_degree, &d)) } else { None };
                for b in 0..ncoef {
                    let mut w = 0.0;
                    for c in 0..3 {
                        d_sh[b * 3 + c] = basis[b] * d_raw[c];
                        w += coeffs[b * 3 + c] * d_raw[c];
                    }
                    if let Some(bg) = &basis_grad {
                        d_dir += bg[b] * w;
                    }
                }
                d_mean += (d_dir - d * d.dot(&d_dir)) / norm;
            }
            let o = frame.splats[k].opacity;
            let d_logit = sg.opacity[k] * o * (1.0 - o);
            let screen = (sg.mean2d[k][0] * half_w).hypot(sg.mean2d[k][1] * half_h);
            (i, d_mean, d_rot, d_ls, d_sh, d_logit, screen)
        })
        .collect();

    let cpg = set.coeffs_per_gaussian();
    for (k, (i, d_mean, d_rot, d_ls, d_sh, d_logit, screen)) in per_splat.into_iter().enumerate() {
        grads.means[i] = d_mean.into();
        grads.rotations[i] = d_rot;
        grads.log_scales[i] = d_ls;
        grads.opacity_logits[i] = d_logit;
        grads.screen_grad_norm[i] = screen;
        grads.visible[i] = true;
        if frame.color_payload {
            grads.sh[i * cpg..(i + 1) * cpg].copy_from_slice(&d_sh[..cpg]);
        } else {
            grads.payload[i * channels..(i + 1) * channels]
                .copy_from_slice(&sg.payload[k * channels..(k + 1) * channels]);
        }
    }
    grads
}
