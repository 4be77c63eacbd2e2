//! Binary checkpoint: magic `VSGS`, a little-endian `u32` version, then
//! chunks of `tag[4] | u64 length | payload`. Numeric payloads are
//! little-endian `f64` so a round trip is bit-exact. Unknown chunks are
//! skipped; `META`, `GAUS` and `DEFM` are required.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::{DeformConfig, DeformField, Encoder, FactorizedEncoder, ImplicitEncoder};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::scene::{Aabb, GaussianSet};
use crate::segment::affinity::AffinityField;
use crate::segment::coarse::CoarseSegmentation;
use crate::train::Model;

pub const MAGIC: [u8; 4] = *b"VSGS";
pub const VERSION: u32 = 1;

const META: [u8; 4] = *b"META";
const GAUS: [u8; 4] = *b"GAUS";
const DEFM: [u8; 4] = *b"DEFM";
const COAR: [u8; 4] = *b"COAR";
const AFFN: [u8; 4] = *b"AFFN";

/// A trained affinity field keyed by its coarse parent label.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityEntry {
    pub parent: u32,
    pub field: AffinityField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Training iterations the model has seen.
    pub iteration: usize,
    /// Hash of the training config, when known.
    pub config_hash: Option<String>,
    pub coarse: Option<CoarseSegmentation>,
    pub affinity: Vec<AffinityEntry>,
}

#[derive(Serialize, Deserialize)]
struct AffinityMeta {
    parent: u32,
    time: f64,
    frequencies: usize,
    aabb: Aabb,
    sizes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum EncoderMeta {
    Factorized {
        n: usize,
        t_res: usize,
        rank_s: usize,
        rank_t: usize,
        combine: crate::deform::Combine,
        aabb: Aabb,
        time_range: [f64; 2],
    },
    Implicit(ImplicitEncoder),
}

#[derive(Serialize, Deserialize)]
struct Meta {
    iteration: usize,
    config_hash: Option<String>,
    sh_degree: usize,
    gaussians: usize,
    deform: DeformConfig,
    encoder: EncoderMeta,
    decoder_sizes: Vec<usize>,
    affinity: Vec<AffinityMeta>,
}

fn push_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Sequential reader over a payload.
struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8], what: &'static str) -> Self {
        Cursor { data, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| corrupt(format!("{} chunk truncated", self.what)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(corrupt(format!("{} chunk has {} trailing bytes", self.what, self.data.len() - self.pos)));
        }
        Ok(())
    }
}

fn encode_gaussians(set: &GaussianSet) -> Vec<u8> {
    let mut out = Vec::new();
    for &id in &set.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    push_f64s(&mut out, set.means.as_flattened().iter().copied());
    push_f64s(&mut out, set.rotations.as_flattened().iter().copied());
    push_f64s(&mut out, set.log_scales.as_flattened().iter().copied());
    push_f64s(&mut out, set.sh.iter().copied());
    push_f64s(&mut out, set.opacity_logits.iter().copied());
    out
}

fn decode_gaussians(data: &[u8], n: usize, sh_degree: usize) -> Result<GaussianSet> {
    if sh_degree > crate::scene::sh::MAX_SH_DEGREE {
        return Err(corrupt(format!("SH degree {sh_degree} unsupported")));
    }
    let mut set = GaussianSet::new(sh_degree);
    let width = set.coeffs_per_gaussian();
    let mut c = Cursor::new(data, "GAUS");
    set.ids = (0..n).map(|_| c.u64()).collect::<Result<_>>()?;
    set.means = c.f64s(3 * n)?.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
    set.rotations = c.f64s(4 * n)?.chunks_exact(4).map(|v| [v[0], v[1], v[2], v[3]]).collect();
    set.log_scales = c.f64s(3 * n)?.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
    set.sh = c.f64s(width * n)?;
    set.opacity_logits = c.f64s(n)?;
    c.finish()?;
    Ok(set)
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            iteration: 0,
            config_hash: None,
            coarse: None,
            affinity: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let field = &self.model.field;
        let encoder = match &field.encoder {
            Encoder::Factorized(e) => EncoderMeta::Factorized {
                n: e.n,
                t_res: e.t_res,
                rank_s: e.rank_s,
                rank_t: e.rank_t,
                combine: e.combine,
                aabb: e.aabb,
                time_range: e.time_range,
            },
            Encoder::Implicit(e) => EncoderMeta::Implicit(e.clone()),
        };
        let meta = Meta {
            iteration: self.iteration,
            config_hash: self.config_hash.clone(),
            sh_degree: self.model.set.sh_degree,
            gaussians: self.model.set.len(),
            deform: field.config.clone(),
            encoder,
            decoder_sizes: field.decoder.sizes(),
            affinity: self
                .affinity
                .iter()
                .map(|a| AffinityMeta {
                    parent: a.parent,
                    time: a.field.time,
                    frequencies: a.field.frequencies,
                    aabb: a.field.aabb,
                    sizes: a.field.mlp.sizes(),
                })
                .collect(),
        };

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut chunk = |tag: [u8; 4], payload: Vec<u8>| {
            out.extend_from_slice(&tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        };
        chunk(META, serde_json::to_vec(&meta).expect("meta serializes"));
        chunk(GAUS, encode_gaussians(&self.model.set));
        let mut defm = Vec::new();
        if let Encoder::Factorized(e) = &field.encoder {
            for s in e.param_slices() {
                push_f64s(&mut defm, s.iter().copied());
            }
        }
        push_f64s(&mut defm, field.decoder.flat_params());
        chunk(DEFM, defm);
        if let Some(c) = &self.coarse {
            chunk(COAR, serde_json::to_vec(c).expect("coarse segmentation serializes"));
        }
        if !self.affinity.is_empty() {
            let mut affn = Vec::new();
            for a in &self.affinity {
                push_f64s(&mut affn, a.field.mlp.flat_params());
            }
            chunk(AFFN, affn);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(corrupt("file shorter than the magic"));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != MAGIC {
            return Err(Error::BadMagic { found, expected: MAGIC });
        }
        let mut c = Cursor::new(&bytes[4..], "header");
        let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let (mut meta, mut gaus, mut defm, mut coar, mut affn) = (None, None, None, None, None);
        while c.pos < c.data.len() {
            let tag: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
            let len = usize::try_from(c.u64()?).map_err(|_| corrupt("chunk length overflow"))?;
            let payload = c.take(len)?;
            match tag {
                META => meta = Some(payload),
                GAUS => gaus = Some(payload),
                DEFM => defm = Some(payload),
                COAR => coar = Some(payload),
                AFFN => affn = Some(payload),
                other => log::warn!("skipping unknown checkpoint chunk {:?}", String::from_utf8_lossy(&other)),
            }
        }
        let meta: Meta = serde_json::from_slice(meta.ok_or_else(|| corrupt("missing META chunk"))?)
            .map_err(|e| corrupt(format!("META: {e}")))?;
        let set = decode_gaussians(gaus.ok_or_else(|| corrupt("missing GAUS chunk"))?, meta.gaussians, meta.sh_degree)?;

        let mut d = Cursor::new(defm.ok_or_else(|| corrupt("missing DEFM chunk"))?, "DEFM");
        let encoder = match meta.encoder {
            EncoderMeta::Factorized {
                n,
                t_res,
                rank_s,
                rank_t,
                combine,
                aabb,
                time_range,
            } => {
                if n < 2 || t_res < 2 || rank_s == 0 || rank_t == 0 {
                    return Err(corrupt("encoder dimensions too small"));
                }
                let mut e = FactorizedEncoder::zeros(n, t_res, rank_s, rank_t, combine, aabb, time_range);
                for s in e.param_slices_mut() {
                    let v = d.f64s(s.len())?;
                    s.copy_from_slice(&v);
                }
                Encoder::Factorized(e)
            }
            EncoderMeta::Implicit(e) => Encoder::Implicit(e),
        };
        let decoder = read_mlp(&mut d, &meta.decoder_sizes)?;
        d.finish()?;
        if decoder.input_dim() != encoder.output_dim() {
            return Err(corrupt("decoder input does not match the encoder"));
        }
        let field = DeformField {
            config: meta.deform,
            encoder,
            decoder,
        };

        let coarse = match coar {
            Some(p) => {
                let c: CoarseSegmentation = serde_json::from_slice(p).map_err(|e| corrupt(format!("COAR: {e}")))?;
                c.validate().map_err(|e| corrupt(format!("COAR: {e}")))?;
                Some(c)
            }
            None => None,
        };

        let mut affinity = Vec::new();
        if !meta.affinity.is_empty() {
            let mut a = Cursor::new(affn.ok_or_else(|| corrupt("missing AFFN chunk"))?, "AFFN");
            for m in meta.affinity {
                let mlp = read_mlp(&mut a, &m.sizes)?;
                if mlp.input_dim() != crate::segment::affinity::input_dim(m.frequencies) {
                    return Err(corrupt("affinity input width does not match its encoding"));
                }
                affinity.push(AffinityEntry {
                    parent: m.parent,
                    field: AffinityField {
                        mlp,
                        aabb: m.aabb,
                        frequencies: m.frequencies,
                        time: m.time,
                    },
                });
            }
            a.finish()?;
        }

        Ok(Checkpoint {
            model: Model { set, field },
            iteration: meta.iteration,
            config_hash: meta.config_hash,
            coarse,
            affinity,
        })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Field for `(parent, time)`, if trained.
    pub fn affinity_for(&self, parent: u32, time: f64) -> Option<&AffinityField> {
        self.affinity.iter().find(|a| a.parent == parent && a.field.time == time).map(|a| &a.field)
    }

    /// Inserts or replaces the field for `(parent, field.time)`.
    pub fn set_affinity(&mut self, parent: u32, field: AffinityField) {
        match self.affinity.iter_mut().find(|a| a.parent == parent && a.field.time == field.time) {
            Some(a) => a.field = field,
            None => self.affinity.push(AffinityEntry { parent, field }),
        }
    }
}

fn read_mlp(c: &mut Cursor<'_>, sizes: &[usize]) -> Result<Mlp> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(corrupt(format!("bad layer sizes {sizes:?}")));
    }
    let count: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let flat = c.f64s(count)?;
    Mlp::from_flat(sizes, &flat).ok_or_else(|| corrupt(format!("parameters do not fit sizes {sizes:?}")))
}
