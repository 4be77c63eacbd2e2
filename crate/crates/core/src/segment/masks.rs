//! 2D mask supervision: providers, non-maximum suppression, 3D mask scales
//! and per-view ingestion.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::loss::mask_iou;
use crate::raster::{render, Frame, Payload, RenderSettings};
use crate::scene::{Camera, GaussianSet};
use crate::synth::{dvr_render, AnalyticScene};

pub const DEFAULT_NMS_IOU: f64 = 0.7;
/// Accumulated blend weight over a mask that makes a Gaussian a member.
pub const MEMBER_WEIGHT_MIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub mask: Mask,
    pub confidence: f64,
}

/// Greedy suppression by descending confidence (ties by index): a mask is
/// dropped when its IoU with an already kept mask exceeds `iou_threshold`.
/// Returns kept indices in selection order.
pub fn mask_nms(masks: &[ScoredMask], iou_threshold: f64) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| masks[b].confidence.total_cmp(&masks[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut suppressed = false;
        for &k in &kept {
            if mask_iou(&masks[i].mask, &masks[k].mask)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Spread of a point set: `sqrt` of the mean per-axis population variance.
pub fn spread(points: &[[f64; 3]]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mut var = 0.0;
    for a in 0..3 {
        let mean = points.iter().map(|p| p[a]).sum::<f64>() / n;
        var += points.iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / n;
    }
    (var / 3.0).sqrt()
}

/// Gaussians whose blend weight summed over the mask's pixels exceeds
/// `weight_min`, in ascending id order. The frame must keep contributors.
pub fn mask_members(mask: &Mask, frame: &Frame, weight_min: f64) -> Vec<u64> {
    let contributors = frame.output.contributors.as_ref().expect("frame rendered with contributor lists");
    let mut acc: HashMap<u64, f64> = HashMap::new();
    for (p, inside) in mask.data.iter().enumerate() {
        if *inside {
            for &(id, w) in &contributors[p] {
                *acc.entry(id).or_default() += w;
            }
        }
    }
    let mut ids: Vec<u64> = acc.into_iter().filter(|&(_, w)| w > weight_min).map(|(id, _)| id).collect();
    ids.sort_unstable();
    ids
}

/// 3D scale of a mask: spread of its member Gaussians' means in `set`.
pub fn estimate_mask_scale(mask: &Mask, frame: &Frame, set: &GaussianSet) -> f64 {
    let index: HashMap<u64, usize> = set.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let pts: Vec<[f64; 3]> = mask_members(mask, frame, MEMBER_WEIGHT_MIN)
        .into_iter()
        .filter_map(|id| index.get(&id).map(|&i| set.means[i]))
        .collect();
    spread(&pts)
}

/// What a provider sees for one view.
pub struct MaskRequest<'a> {
    pub view: usize,
    pub camera: &'a Camera,
    pub time: f64,
    /// Render of the segment's Gaussians alone.
    pub image: &'a Image,
}

/// Source of scored 2D masks for a view.
pub trait MaskProvider: Send + Sync {
    fn masks(&self, request: &MaskRequest<'_>) -> Result<Vec<ScoredMask>>;
}

/// Ground-truth masks from the analytic scene: one mask per listed blob
/// (pixels where that blob dominates a render of the listed blobs with
/// alpha ≥ 0.5), plus optionally their union.
#[derive(Clone, Debug)]
pub struct GtMaskProvider {
    pub scene: AnalyticScene,
    pub blobs: Vec<usize>,
    pub include_union: bool,
    /// Masks smaller than this many pixels are not reported.
    pub min_pixels: usize,
}

impl GtMaskProvider {
    pub const LEAF_CONFIDENCE: f64 = 1.0;
    pub const UNION_CONFIDENCE: f64 = 0.9;

    pub fn new(scene: AnalyticScene, blobs: Vec<usize>) -> Self {
        GtMaskProvider {
            scene,
            blobs,
            include_union: false,
            min_pixels: 4,
        }
    }
}

impl MaskProvider for GtMaskProvider {
    fn masks(&self, request: &MaskRequest<'_>) -> Result<Vec<ScoredMask>> {
        let sub = self.scene.subset(&self.blobs);
        let out = dvr_render(&sub, request.camera, request.time);
        let (w, h) = (request.camera.width, request.camera.height);
        let mut masks = Vec::new();
        for k in 0..self.blobs.len() {
            let data: Vec<bool> = (0..w * h).map(|p| out.alpha[p] >= 0.5 && out.dominant_blob[p] == Some(k)).collect();
            let mask = Mask { width: w, height: h, data };
            if mask.count() >= self.min_pixels {
                masks.push(ScoredMask {
                    mask,
                    confidence: Self::LEAF_CONFIDENCE,
                });
            }
        }
        if self.include_union && self.blobs.len() > 1 {
            let mask = out.alpha_mask(0.5);
            if mask.count() >= self.min_pixels {
                masks.push(ScoredMask {
                    mask,
                    confidence: Self::UNION_CONFIDENCE,
                });
            }
        }
        Ok(masks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub view: usize,
    pub mask: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskIndex {
    pub masks: Vec<MaskIndexEntry>,
}

pub const MASK_INDEX_FILE: &str = "index.json";

pub fn mask_file(view: usize, mask: usize) -> String {
    format!("view_{view}/mask_{mask}.png")
}

/// Masks read from `index.json` plus `view_{v}/mask_{m}.png` files.
#[derive(Clone, Debug)]
pub struct DirectoryMaskProvider {
    by_view: HashMap<usize, Vec<ScoredMask>>,
}

impl DirectoryMaskProvider {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MASK_INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: MaskIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut by_view: HashMap<usize, Vec<ScoredMask>> = HashMap::new();
        for e in index.masks {
            let mask = Mask::load_png(&dir.join(mask_file(e.view, e.mask)))?;
            by_view.entry(e.view).or_default().push(ScoredMask {
                mask,
                confidence: e.confidence,
            });
        }
        Ok(DirectoryMaskProvider { by_view })
    }

    pub fn views(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.by_view.keys().copied().collect();
        v.sort_unstable();
        v
    }
}

impl MaskProvider for DirectoryMaskProvider {
    fn masks(&self, request: &MaskRequest<'_>) -> Result<Vec<ScoredMask>> {
        let masks = self.by_view.get(&request.view).cloned().unwrap_or_default();
        for m in &masks {
            if (m.mask.width, m.mask.height) != (request.camera.width, request.camera.height) {
                return Err(Error::ShapeMismatch(format!(
                    "mask for view {} is {}x{}, camera is {}x{}",
                    request.view, m.mask.width, m.mask.height, request.camera.width, request.camera.height
                )));
            }
        }
        Ok(masks)
    }
}

/// Writes masks in the directory-provider layout.
pub fn write_mask_dir(dir: &Path, views: &[(usize, Vec<ScoredMask>)]) -> Result<()> {
    let mut index = MaskIndex::default();
    for (view, masks) in views {
        let sub = dir.join(format!("view_{view}"));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (m, sm) in masks.iter().enumerate() {
            sm.mask.save_png(&dir.join(mask_file(*view, m)))?;
            index.masks.push(MaskIndexEntry {
                view: *view,
                mask: m,
                confidence: sm.confidence,
            });
        }
    }
    let path = dir.join(MASK_INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// One mask after NMS with its 3D scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledMask {
    pub mask: Mask,
    pub confidence: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMasks {
    pub view: usize,
    pub camera: Camera,
    pub masks: Vec<ScaledMask>,
}

/// Supervision for one coarse segment at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub time: f64,
    pub views: Vec<ViewMasks>,
}

impl MaskSet {
    pub fn mask_count(&self) -> usize {
        self.views.iter().map(|v| v.masks.len()).sum()
    }

    /// Largest mask scale, the natural upper end of a scale slider.
    pub fn max_scale(&self) -> f64 {
        self.views.iter().flat_map(|v| v.masks.iter().map(|m| m.scale)).fold(0.0, f64::max)
    }
}

/// Renders the segment (`segment_set`, already deformed to `time`) from each
/// view, asks the provider for masks, applies NMS and estimates scales.
/// Views whose provider call fails are skipped with a warning.
pub fn ingest_masks(
    provider: &dyn MaskProvider,
    segment_set: &GaussianSet,
    views: &[(usize, Camera)],
    time: f64,
    nms_iou: f64,
    settings: &RenderSettings,
) -> Result<MaskSet> {
    let mut out = Vec::new();
    for (view, camera) in views {
        let frame = render(segment_set, camera, Payload::Color, settings, true);
        let image = Image::from_data(camera.width, camera.height, 3, frame.output.image.clone())?;
        let request = MaskRequest {
            view: *view,
            camera,
            time,
            image: &image,
        };
        let masks = match provider.masks(&request) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("mask provider failed on view {view}: {e}");
                continue;
            }
        };
        let kept = mask_nms(&masks, nms_iou)?;
        let scaled: Vec<ScaledMask> = kept
            .into_iter()
            .map(|i| ScaledMask {
                scale: estimate_mask_scale(&masks[i].mask, &frame, segment_set),
                mask: masks[i].mask.clone(),
                confidence: masks[i].confidence,
            })
            .collect();
        if !scaled.is_empty() {
            out.push(ViewMasks {
                view: *view,
                camera: camera.clone(),
                masks: scaled,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::NoSupervision);
    }
    Ok(MaskSet { time, views: out })
}
