//! Segments, groups and declarative edits, plus the renders that track them
//! through time. Membership is a fixed id set; only the deformation moves it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::raster::{render, Frame, Payload, RenderSettings};
use crate::scene::sh::rgb_to_dc;
use crate::scene::{logit, sigmoid, Camera, GaussianSet};
use crate::train::Model;

/// Opacity after scaling is clamped into `[OPACITY_FLOOR, OPACITY_CEIL]`.
pub const OPACITY_FLOOR: f64 = 1e-6;
pub const OPACITY_CEIL: f64 = 0.999;
/// Opacity factor applied to non-members in highlight mode.
pub const HIGHLIGHT_DIM: f64 = 0.3;
/// Gray non-members are drawn with in highlight mode.
pub const HIGHLIGHT_GRAY: f64 = 0.5;
/// Opacity factor applied to non-members in hide-others mode.
pub const HIDE_DIM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Coarse { label: u32 },
    Fine { parent: u32, scale: f64, tau: f64 },
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u64,
    pub name: String,
    /// Ascending Gaussian ids, never empty.
    pub ids: Vec<u64>,
    pub provenance: Provenance,
    pub created_at: f64,
    /// Centroid of the members at `created_at`; the pivot of affine edits.
    pub pivot: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentGroup {
    pub id: u64,
    pub name: String,
    pub members: Vec<u64>,
    pub pivot: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditKind {
    Recolor { rgb: [f64; 3] },
    OpacityScale { factor: f64 },
    Affine { translation: [f64; 3], scale: f64 },
}

impl EditKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            EditKind::Recolor { rgb } if rgb.iter().any(|c| !c.is_finite()) => {
                Err(Error::InvalidArgument(format!("recolor needs finite rgb, got {rgb:?}")))
            }
            EditKind::OpacityScale { factor } if !(*factor > 0.0 && factor.is_finite()) => {
                Err(Error::InvalidArgument(format!("opacity factor must be positive, got {factor}")))
            }
            EditKind::Affine { translation, scale } => {
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(Error::InvalidArgument(format!("affine scale must be positive, got {scale}")));
                }
                if translation.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidArgument(format!("translation must be finite, got {translation:?}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    /// Segment or group id.
    pub target: u64,
    pub kind: EditKind,
}

/// An edit resolved against the registry, ready to replay.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedEdit {
    pub ids: HashSet<u64>,
    pub pivot: [f64; 3],
    pub kind: EditKind,
}

/// Segments, groups and the ordered edit list. Segment and group ids share
/// one counter. Every mutation bumps `revision`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub revision: u64,
    next_id: u64,
    pub segments: BTreeMap<u64, Segment>,
    pub groups: BTreeMap<u64, SegmentGroup>,
    pub edits: Vec<Edit>,
}

/// Mean position of the listed Gaussians in `set`; ids not in `set` are
/// ignored. Origin when none match.
pub fn centroid(set: &GaussianSet, ids: &[u64]) -> [f64; 3] {
    let wanted: HashSet<u64> = ids.iter().copied().collect();
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (i, id) in set.ids.iter().enumerate() {
        if wanted.contains(id) {
            for a in 0..3 {
                sum[a] += set.means[i][a];
            }
            n += 1;
        }
    }
    if n == 0 {
        return [0.0; 3];
    }
    sum.map(|s| s / n as f64)
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    fn bump(&mut self) {
        self.revision += 1;
    }

    /// Registers a segment; `deformed` is the set at `created_at`, used for the pivot.
    pub fn add_segment(
        &mut self,
        name: impl Into<String>,
        ids: Vec<u64>,
        provenance: Provenance,
        created_at: f64,
        deformed: &GaussianSet,
    ) -> Result<u64> {
        let mut ids = ids;
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("a segment needs at least one Gaussian".into()));
        }
        let present: HashSet<u64> = deformed.ids.iter().copied().collect();
        if let Some(missing) = ids.iter().find(|id| !present.contains(id)) {
            return Err(Error::InvalidArgument(format!("Gaussian {missing} is not in the model")));
        }
        let id = self.next_id;
        self.next_id += 1;
        let pivot = centroid(deformed, &ids);
        self.segments.insert(
            id,
            Segment {
                id,
                name: name.into(),
                ids,
                provenance,
                created_at,
                pivot,
            },
        );
        self.bump();
        Ok(id)
    }

    /// Groups existing segments; the pivot is the union's centroid in `deformed`.
    pub fn add_group(&mut self, name: impl Into<String>, members: Vec<u64>, deformed: &GaussianSet) -> Result<u64> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("a group needs at least one segment".into()));
        }
        if let Some(&m) = members.iter().find(|m| !self.segments.contains_key(m)) {
            return Err(Error::UnknownSegment(m));
        }
        let id = self.next_id;
        self.next_id += 1;
        let union = self.resolve_many(&members)?;
        let pivot = centroid(deformed, &union);
        self.groups.insert(
            id,
            SegmentGroup {
                id,
                name: name.into(),
                members,
                pivot,
            },
        );
        self.bump();
        Ok(id)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.segments.contains_key(&id) || self.groups.contains_key(&id)
    }

    /// Removes a segment or group with the edits targeting it. A removed
    /// segment also leaves every group; groups left empty are removed too.
    pub fn remove(&mut self, id: u64) -> Result<()> {
        if self.segments.remove(&id).is_none() && self.groups.remove(&id).is_none() {
            return Err(Error::UnknownSegment(id));
        }
        let mut gone = vec![id];
        for g in self.groups.values_mut() {
            g.members.retain(|&m| m != id);
        }
        let empty: Vec<u64> = self.groups.values().filter(|g| g.members.is_empty()).map(|g| g.id).collect();
        for g in empty {
            self.groups.remove(&g);
            gone.push(g);
        }
        self.edits.retain(|e| !gone.contains(&e.target));
        self.bump();
        Ok(())
    }

    pub fn add_edit(&mut self, target: u64, kind: EditKind) -> Result<()> {
        if !self.contains(target) {
            return Err(Error::UnknownSegment(target));
        }
        kind.validate()?;
        self.edits.push(Edit { target, kind });
        self.bump();
        Ok(())
    }

    /// Gaussian ids of a segment or group, ascending.
    pub fn resolve(&self, id: u64) -> Result<Vec<u64>> {
        if let Some(s) = self.segments.get(&id) {
            return Ok(s.ids.clone());
        }
        if let Some(g) = self.groups.get(&id) {
            return self.resolve_many(&g.members);
        }
        Err(Error::UnknownSegment(id))
    }

    /// Union of several segments or groups, ascending.
    pub fn resolve_many(&self, ids: &[u64]) -> Result<Vec<u64>> {
        let mut all = BTreeSet::new();
        for &id in ids {
            all.extend(self.resolve(id)?);
        }
        Ok(all.into_iter().collect())
    }

    fn pivot_of(&self, id: u64) -> Result<[f64; 3]> {
        if let Some(s) = self.segments.get(&id) {
            return Ok(s.pivot);
        }
        self.groups.get(&id).map(|g| g.pivot).ok_or(Error::UnknownSegment(id))
    }

    pub fn resolved_edits(&self) -> Result<Vec<ResolvedEdit>> {
        self.edits
            .iter()
            .map(|e| {
                Ok(ResolvedEdit {
                    ids: self.resolve(e.target)?.into_iter().collect(),
                    pivot: self.pivot_of(e.target)?,
                    kind: e.kind.clone(),
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::json(path, e))
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Sidecar path for a checkpoint: `model.vsgs` → `model.segments.json`.
pub fn sidecar_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("segments.json")
}

/// Replays `edits` in order on a set that is already deformed.
pub fn apply_edits(set: &mut GaussianSet, edits: &[ResolvedEdit]) {
    let width = set.coeffs_per_gaussian();
    for edit in edits {
        for i in 0..set.len() {
            if !edit.ids.contains(&set.ids[i]) {
                continue;
            }
            match &edit.kind {
                EditKind::Recolor { rgb } => {
                    let row = &mut set.sh[i * width..(i + 1) * width];
                    row.fill(0.0);
                    for c in 0..3 {
                        row[c] = rgb_to_dc(rgb[c].clamp(0.0, 1.0));
                    }
                }
                EditKind::OpacityScale { factor } => {
                    // A unit factor must leave the logit bit-identical.
                    if *factor != 1.0 {
                        let o = (sigmoid(set.opacity_logits[i]) * factor).clamp(OPACITY_FLOOR, OPACITY_CEIL);
                        set.opacity_logits[i] = logit(o);
                    }
                }
                EditKind::Affine { translation, scale } => {
                    let m = &mut set.means[i];
                    if *scale != 1.0 {
                        for a in 0..3 {
                            m[a] = edit.pivot[a] + scale * (m[a] - edit.pivot[a]);
                        }
                        let ls = scale.ln();
                        set.log_scales[i].iter_mut().for_each(|v| *v += ls);
                    }
                    for a in 0..3 {
                        m[a] += translation[a];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackMode {
    /// No filtering: the whole edited scene.
    #[default]
    All,
    Isolate,
    Highlight,
    HideOthers,
}

impl std::str::FromStr for TrackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TrackMode::All),
            "isolate" => Ok(TrackMode::Isolate),
            "highlight" => Ok(TrackMode::Highlight),
            "hide-others" => Ok(TrackMode::HideOthers),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}; expected all, isolate, highlight or hide-others"))),
        }
    }
}

/// The model deformed to `t` with every registry edit replayed.
pub fn edited_at(model: &Model, registry: &Registry, t: f64) -> Result<GaussianSet> {
    let mut set = model.at_time(t);
    apply_edits(&mut set, &registry.resolved_edits()?);
    Ok(set)
}

/// Applies a tracking mode to an edited set for the given member ids.
pub fn filter_for_mode(set: &GaussianSet, members: &HashSet<u64>, mode: TrackMode) -> GaussianSet {
    match mode {
        TrackMode::All => set.clone(),
        TrackMode::Isolate => set.select_ids(members),
        TrackMode::Highlight | TrackMode::HideOthers => {
            let mut out = set.clone();
            let dim = if mode == TrackMode::Highlight { HIGHLIGHT_DIM } else { HIDE_DIM };
            let width = out.coeffs_per_gaussian();
            for i in 0..out.len() {
                if members.contains(&out.ids[i]) {
                    continue;
                }
                let o = (sigmoid(out.opacity_logits[i]) * dim).clamp(OPACITY_FLOOR, OPACITY_CEIL);
                out.opacity_logits[i] = logit(o);
                if mode == TrackMode::Highlight {
                    let row = &mut out.sh[i * width..(i + 1) * width];
                    row.fill(0.0);
                    row[..3].fill(rgb_to_dc(HIGHLIGHT_GRAY));
                }
            }
            out
        }
    }
}

/// Renders `selection` (segment or group ids) at time `t`. An empty
/// selection with a filtering mode renders nothing but background.
pub fn track_render(
    model: &Model,
    registry: &Registry,
    selection: &[u64],
    t: f64,
    camera: &Camera,
    mode: TrackMode,
    settings: &RenderSettings,
) -> Result<Frame> {
    let members: HashSet<u64> = registry.resolve_many(selection)?.into_iter().collect();
    let set = edited_at(model, registry, t)?;
    let shown = filter_for_mode(&set, &members, mode);
    Ok(render(&shown, camera, Payload::Color, settings, false))
}

pub fn frame_image(frame: &Frame) -> Image {
    let o = &frame.output;
    Image::from_data(o.width, o.height, o.channels, o.image.clone()).expect("frame buffer matches its shape")
}

/// Per-Gaussian colors for the x-displacement `Δμ_x` at `t`: red for
/// positive, blue for negative, brightness proportional to `|Δμ_x|` over the
/// largest magnitude. Returns the colors and that magnitude.
pub fn velocity_colors(model: &Model, t: f64) -> (Vec<f64>, f64) {
    let deformed = model.at_time(t);
    let dx: Vec<f64> = deformed.means.iter().zip(&model.set.means).map(|(d, c)| d[0] - c[0]).collect();
    let max = dx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut colors = Vec::with_capacity(3 * dx.len());
    for v in dx {
        let m = if max > 0.0 { v.abs() / max } else { 0.0 };
        colors.extend(if v >= 0.0 { [m, 0.0, 0.0] } else { [0.0, 0.0, m] });
    }
    (colors, max)
}

/// Renders the deformed scene with [`velocity_colors`] as the payload.
pub fn velocity_render(model: &Model, t: f64, camera: &Camera, settings: &RenderSettings) -> (Image, f64) {
    let deformed = model.at_time(t);
    let (colors, max) = velocity_colors(model, t);
    let frame = render(
        &deformed,
        camera,
        Payload::Channels {
            values: &colors,
            channels: 3,
        },
        settings,
        false,
    );
    (frame_image(&frame), max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{DeformConfig, DeformField};
    use crate::scene::{Aabb, Gaussian};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set() -> GaussianSet {
        let mut s = GaussianSet::new(1);
        for i in 0..6u64 {
            let x = -0.75 + 0.3 * i as f64;
            s.push(Gaussian {
                id: 10 + i,
                mean: [x, 0.0, 0.1 * i as f64],
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [0.12f64.ln(); 3],
                sh: (0..12).map(|k| 0.05 * k as f64 - 0.2).collect(),
                opacity_logit: logit(0.7),
            });
        }
        s
    }

    fn model(zero: bool) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aabb = Aabb::new([-1.0; 3], [1.0; 3]);
        let mut field = DeformField::new(DeformConfig::default(), aabb, [0.0, 1.0], &mut rng);
        if !zero {
            let mut flat = field.decoder.flat_params();
            flat.iter_mut().enumerate().for_each(|(k, v)| *v += 0.05 * ((k % 7) as f64 - 3.0));
            field.decoder.set_flat_params(&flat);
        }
        Model { set: set(), field }
    }

    fn cam() -> Camera {
        Camera::look_at(Vector3::new(0.0, -4.0, 0.3), Vector3::new(0.0, 0.0, 0.25), Vector3::z(), 0.8, 24, 24).unwrap()
    }

    fn registry_with_segment(m: &Model) -> (Registry, u64) {
        let mut r = Registry::new();
        let id = r.add_segment("left", vec![11, 10], Provenance::Manual, 0.5, &m.at_time(0.5)).unwrap();
        (r, id)
    }

    #[test]
    fn registry_validates_and_bumps_revision() {
        let m = model(true);
        let (mut r, a) = registry_with_segment(&m);
        assert_eq!(r.revision, 1);
        assert_eq!(r.segments[&a].ids, vec![10, 11]);
        assert!(r.add_segment("x", vec![], Provenance::Manual, 0.0, &m.set).is_err());
        assert!(r.add_segment("x", vec![99], Provenance::Manual, 0.0, &m.set).is_err());
        assert!(matches!(r.add_edit(42, EditKind::OpacityScale { factor: 2.0 }), Err(Error::UnknownSegment(42))));
        assert!(r.add_edit(a, EditKind::OpacityScale { factor: 0.0 }).is_err());
        assert!(r.add_edit(a, EditKind::Affine { translation: [0.0; 3], scale: -1.0 }).is_err());
        assert_eq!(r.revision, 1);
        let b = r.add_segment("right", vec![15], Provenance::Coarse { label: 1 }, 0.5, &m.set).unwrap();
        let g = r.add_group("pair", vec![a, b], &m.set).unwrap();
        assert_eq!(r.resolve(g).unwrap(), vec![10, 11, 15]);
        r.add_edit(g, EditKind::Recolor { rgb: [1.0, 0.0, 0.0] }).unwrap();
        r.remove(b).unwrap();
        assert_eq!(r.resolve(g).unwrap(), vec![10, 11]);
        r.remove(a).unwrap();
        // The group emptied out and its edit went with it.
        assert!(!r.contains(g));
        assert!(r.edits.is_empty());
        assert!(matches!(r.remove(a), Err(Error::UnknownSegment(_))));
    }

    #[test]
    fn registry_json_round_trip() {
        let m = model(true);
        let (mut r, a) = registry_with_segment(&m);
        r.add_edit(a, EditKind::Affine { translation: [0.1, 0.2, 0.3], scale: 1.5 }).unwrap();
        let back = Registry::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let dir = tempfile::tempdir().unwrap();
        let p = sidecar_path(&dir.path().join("model.vsgs"));
        assert!(p.ends_with("model.segments.json"));
        r.save(&p).unwrap();
        assert_eq!(Registry::load(&p).unwrap(), r);
    }

    #[test]
    fn identity_edits_are_bit_identical() {
        let s = set();
        let mut e = s.clone();
        let ids: HashSet<u64> = s.ids.iter().copied().collect();
        let edits = [
            ResolvedEdit { ids: ids.clone(), pivot: [0.3, -0.2, 0.1], kind: EditKind::Affine { translation: [0.0; 3], scale: 1.0 } },
            ResolvedEdit { ids, pivot: [0.0; 3], kind: EditKind::OpacityScale { factor: 1.0 } },
        ];
        apply_edits(&mut e, &edits);
        assert_eq!(e, s);
    }

    #[test]
    fn edits_touch_only_members() {
        let s = set();
        let mut e = s.clone();
        let ids: HashSet<u64> = [11, 12].into_iter().collect();
        let pivot = [0.1, 0.0, 0.0];
        let edits = [
            ResolvedEdit { ids: ids.clone(), pivot, kind: EditKind::Recolor { rgb: [1.0, 0.0, 0.0] } },
            ResolvedEdit { ids: ids.clone(), pivot, kind: EditKind::OpacityScale { factor: 10.0 } },
            ResolvedEdit { ids, pivot, kind: EditKind::Affine { translation: [0.0, 1.0, 0.0], scale: 2.0 } },
        ];
        apply_edits(&mut e, &edits);
        for i in [0, 3, 4, 5] {
            assert_eq!(e.get(i), s.get(i));
        }
        for i in [1, 2] {
            assert_eq!(&e.sh_of(i)[3..], &[0.0; 9]);
            assert!((e.opacity(i) - OPACITY_CEIL).abs() < 1e-12);
            for a in 0..3 {
                let want = pivot[a] + 2.0 * (s.means[i][a] - pivot[a]) + [0.0, 1.0, 0.0][a];
                assert!((e.means[i][a] - want).abs() < 1e-15);
                assert!((e.scale(i)[a] - 2.0 * s.scale(i)[a]).abs() < 1e-12);
            }
            let d = Vector3::new(0.3, -0.5, 0.8).normalize();
            let rgb = crate::scene::sh::sh_to_rgb(1, e.sh_of(i), &d);
            assert!((rgb[0] - 1.0).abs() < 1e-12 && rgb[1].abs() < 1e-12 && rgb[2].abs() < 1e-12);
        }
    }

    #[test]
    fn isolate_at_creation_time_matches_segment_render() {
        let m = model(false);
        let (r, a) = registry_with_segment(&m);
        let st = RenderSettings::default();
        let f = track_render(&m, &r, &[a], 0.5, &cam(), TrackMode::Isolate, &st).unwrap();
        let deformed = m.at_time(0.5);
        let only = deformed.select(&[0, 1]);
        let direct = render(&only, &cam(), Payload::Color, &st, false);
        assert_eq!(f.output.image, direct.output.image);
    }

    #[test]
    fn tracking_is_stateless() {
        let m = model(false);
        let (r, a) = registry_with_segment(&m);
        let st = RenderSettings::default();
        let direct = track_render(&m, &r, &[a], 0.2, &cam(), TrackMode::Highlight, &st).unwrap();
        track_render(&m, &r, &[a], 0.9, &cam(), TrackMode::Highlight, &st).unwrap();
        let again = track_render(&m, &r, &[a], 0.2, &cam(), TrackMode::Highlight, &st).unwrap();
        assert_eq!(direct.output.image, again.output.image);
        assert!(matches!(track_render(&m, &r, &[77], 0.2, &cam(), TrackMode::Isolate, &st), Err(Error::UnknownSegment(77))));
    }

    #[test]
    fn translation_persists_across_time() {
        let m = model(false);
        let (mut r, a) = registry_with_segment(&m);
        r.add_edit(a, EditKind::Affine { translation: [5.0, 0.0, 0.0], scale: 1.0 }).unwrap();
        for t in [0.1, 0.8] {
            let plain = m.at_time(t);
            let edited = edited_at(&m, &r, t).unwrap();
            assert_ne!(plain.means[0], m.set.means[0]);
            for i in 0..plain.len() {
                let shift = if i < 2 { 5.0 } else { 0.0 };
                assert!((edited.means[i][0] - plain.means[i][0] - shift).abs() < 1e-12);
                assert_eq!(edited.means[i][1], plain.means[i][1]);
            }
        }
    }

    #[test]
    fn hide_others_dims_non_members() {
        let s = set();
        let members: HashSet<u64> = [10].into_iter().collect();
        let h = filter_for_mode(&s, &members, TrackMode::HideOthers);
        assert_eq!(h.get(0), s.get(0));
        assert!((h.opacity(1) - HIDE_DIM * s.opacity(1)).abs() < 1e-12);
        let g = filter_for_mode(&s, &members, TrackMode::Highlight);
        assert!((g.opacity(2) - HIGHLIGHT_DIM * s.opacity(2)).abs() < 1e-12);
        assert_eq!(filter_for_mode(&s, &members, TrackMode::Isolate).ids, vec![10]);
        assert_eq!("hide-others".parse::<TrackMode>().unwrap(), TrackMode::HideOthers);
        assert!("sideways".parse::<TrackMode>().is_err());
    }

    #[test]
    fn velocity_colors_encode_sign() {
        let still = model(true);
        let (c, max) = velocity_colors(&still, 0.4);
        assert_eq!(max, 0.0);
        assert!(c.iter().all(|&v| v == 0.0));
        let moving = model(false);
        let (c, max) = velocity_colors(&moving, 0.4);
        assert!(max > 0.0);
        let d = moving.at_time(0.4);
        for i in 0..d.len() {
            let dx = d.means[i][0] - moving.set.means[i][0];
            let rgb = &c[3 * i..3 * i + 3];
            assert!((rgb[0].max(rgb[2]) - dx.abs() / max).abs() < 1e-12);
            assert_eq!(rgb[1], 0.0);
            if dx > 0.0 {
                assert_eq!(rgb[2], 0.0);
            }
        }
        let (img, _) = velocity_render(&moving, 0.4, &cam(), &RenderSettings::default());
        assert_eq!((img.width, img.height, img.channels), (24, 24, 3));
    }
}
