//! Deformation field: a spatiotemporal encoder followed by a small decoder
//! that predicts per-Gaussian offsets `(Δμ, Δr, Δs, Δo)` at a time `t`.
//!
//! Offsets are added to the canonical attributes. Rotations stay raw
//! quaternions (`r + Δr`); they are normalized where the covariance is
//! built, so a zero offset leaves the set bit-identical.

pub mod encoder;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use encoder::{Combine, FactorizedEncoder, GridCoord, ImplicitEncoder};

use crate::nn::{Mlp, MlpCache};
use crate::raster::GaussianGrads;
use crate::scene::{Aabb, GaussianSet};

/// Decoder output layout.
pub const DELTA_DIM: usize = 11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Hybrid,
    Implicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    pub encoder: EncoderKind,
    pub grid_res: usize,
    pub time_res: usize,
    pub rank_s: usize,
    pub rank_t: usize,
    pub combine: Combine,
    pub decoder_hidden: Vec<usize>,
    /// Encoder entries start uniform in `±init_range`.
    pub init_range: f64,
    pub implicit_frequencies: usize,
    pub implicit_hidden: Vec<usize>,
    pub opacity_deform: bool,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig {
            encoder: EncoderKind::Hybrid,
            grid_res: 64,
            time_res: 64,
            rank_s: 16,
            rank_t: 8,
            combine: Combine::Concat,
            decoder_hidden: vec![64, 64],
            init_range: 0.1,
            implicit_frequencies: 6,
            implicit_hidden: vec![128, 128, 128],
            opacity_deform: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Factorized(FactorizedEncoder),
    Implicit(ImplicitEncoder),
}

impl Encoder {
    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Factorized(e) => e.output_dim(),
            Encoder::Implicit(e) => e.output_dim(),
        }
    }

    pub fn encode(&self, x: &[f64; 3], t: f64) -> Vec<f64> {
        match self {
            Encoder::Factorized(e) => e.encode(x, t),
            Encoder::Implicit(e) => e.encode(x, t),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Encoder::Factorized(e) => e.param_count(),
            Encoder::Implicit(_) => 0,
        }
    }
}

/// Per-Gaussian offsets.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Deformation {
    pub d_mean: [f64; 3],
    pub d_rotation: [f64; 4],
    pub d_log_scale: [f64; 3],
    pub d_opacity_logit: f64,
}

impl Deformation {
    fn from_row(row: &[f64], opacity: bool) -> Self {
        Deformation {
            d_mean: [row[0], row[1], row[2]],
            d_rotation: [row[3], row[4], row[5], row[6]],
            d_log_scale: [row[7], row[8], row[9]],
            d_opacity_logit: if opacity { row[10] } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformField {
    pub config: DeformConfig,
    pub encoder: Encoder,
    pub decoder: Mlp,
}

/// Gradients for the field parameters. The encoder part is `None` for the
/// parameter-free implicit encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads {
    pub encoder: Option<FactorizedEncoder>,
    pub decoder: Mlp,
}

/// Forward state for [`DeformField::backward`].
#[derive(Clone, Debug)]
pub struct DeformCache {
    pub t: f64,
    mlp: MlpCache,
}

impl DeformField {
    /// `aabb` is the normalization box (callers pass the scene box dilated
    /// by 5%). The final decoder layer is zero, so the initial field is the
    /// identity deformation.
    pub fn new(config: DeformConfig, aabb: Aabb, time_range: [f64; 2], rng: &mut impl Rng) -> Self {
        let encoder = match config.encoder {
            EncoderKind::Hybrid => Encoder::Factorized(FactorizedEncoder::random(
                config.grid_res,
                config.time_res,
                config.rank_s,
                config.rank_t,
                config.combine,
                aabb,
                time_range,
                config.init_range,
                rng,
            )),
            EncoderKind::Implicit => Encoder::Implicit(ImplicitEncoder {
                frequencies: config.implicit_frequencies,
                aabb,
                time_range,
            }),
        };
        let hidden = match config.encoder {
            EncoderKind::Hybrid => &config.decoder_hidden,
            EncoderKind::Implicit => &config.implicit_hidden,
        };
        let mut sizes = vec![encoder.output_dim()];
        sizes.extend(hidden);
        sizes.push(DELTA_DIM);
        let decoder = Mlp::new(&sizes, true, rng);
        DeformField { config, encoder, decoder }
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn zero_grads(&self) -> FieldGrads {
        FieldGrads {
            encoder: match &self.encoder {
                Encoder::Factorized(e) => Some(e.zeros_like()),
                Encoder::Implicit(_) => None,
            },
            decoder: self.decoder.zeros_like(),
        }
    }

    fn features(&self, means: &[[f64; 3]], t: f64) -> Array2<f64> {
        let dim = self.encoder.output_dim();
        let rows: Vec<f64> = means.par_iter().flat_map_iter(|m| self.encoder.encode(m, t)).collect();
        Array2::from_shape_vec((means.len(), dim), rows).expect("feature rows have the encoder width")
    }

    /// Offsets for each mean at time `t`.
    pub fn deformations(&self, means: &[[f64; 3]], t: f64) -> Vec<Deformation> {
        if means.is_empty() {
            return Vec::new();
        }
        let out = self.decoder.forward(self.features(means, t).view()).output;
        out.rows()
            .into_iter()
            .map(|r| Deformation::from_row(r.as_slice().unwrap(), self.config.opacity_deform))
            .collect()
    }

    /// The set deformed to time `t`, plus the state needed for gradients.
    pub fn forward(&self, set: &GaussianSet, t: f64) -> (GaussianSet, DeformCache) {
        let mut out = set.clone();
        let features = self.features(&set.means, t);
        let mlp = self.decoder.forward(features.view());
        for (i, row) in mlp.output.rows().into_iter().enumerate() {
            let d = Deformation::from_row(row.as_slice().unwrap(), self.config.opacity_deform);
            apply(&mut out, i, &d);
        }
        (out, DeformCache { t, mlp })
    }

    pub fn deform(&self, set: &GaussianSet, t: f64) -> GaussianSet {
        if set.is_empty() {
            return set.clone();
        }
        self.forward(set, t).0
    }

    /// Chains gradients of the deformed attributes back to the field
    /// parameters. Returns field gradients and the extra mean gradient that
    /// flows through the encoder's spatial input; every other canonical
    /// attribute gradient equals the deformed one.
    pub fn backward(&self, set: &GaussianSet, cache: &DeformCache, grads: &GaussianGrads) -> (FieldGrads, Vec<[f64; 3]>) {
        let n = set.len();
        let mut d_out = Array2::zeros((n, DELTA_DIM));
        for i in 0..n {
            let mut row = d_out.row_mut(i);
            for a in 0..3 {
                row[a] = grads.means[i][a];
                row[7 + a] = grads.log_scales[i][a];
            }
            for a in 0..4 {
                row[3 + a] = grads.rotations[i][a];
            }
            if self.config.opacity_deform {
                row[10] = grads.opacity_logits[i];
            }
        }
        let (decoder, d_feat) = self.decoder.backward(&cache.mlp, d_out.view());
        let mut field = FieldGrads { encoder: None, decoder };
        let mut d_mean = vec![[0.0; 3]; n];
        match &self.encoder {
            Encoder::Factorized(e) => {
                // Serial accumulation keeps the grid gradient order fixed.
                let mut g = e.zeros_like();
                for i in 0..n {
                    let row = d_feat.row(i);
                    let row = row.as_slice().unwrap();
                    if row.iter().any(|&v| v != 0.0) {
                        d_mean[i] = e.backward(&set.means[i], cache.t, row, &mut g);
                    }
                }
                field.encoder = Some(g);
            }
            Encoder::Implicit(e) => {
                d_mean.par_iter_mut().enumerate().for_each(|(i, d)| {
                    let row = d_feat.row(i);
                    *d = e.backward(&set.means[i], cache.t, row.as_slice().unwrap());
                });
            }
        }
        (field, d_mean)
    }
}

fn apply(set: &mut GaussianSet, i: usize, d: &Deformation) {
    for a in 0..3 {
        set.means[i][a] += d.d_mean[a];
        set.log_scales[i][a] += d.d_log_scale[a];
    }
    for a in 0..4 {
        set.rotations[i][a] += d.d_rotation[a];
    }
    set.opacity_logits[i] += d.d_opacity_logit;
}
