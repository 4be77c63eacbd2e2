use std::collections::HashSet;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderName, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use dynsplat_core::raster::{render, Payload};
use dynsplat_core::segment::affinity::{segment_by_click, DEFAULT_TAU};
use dynsplat_core::segment::coarse::{CoarseSegmentation, DEFAULT_DIRECTIONS, DEFAULT_MIN_NEIGHBORS};
use dynsplat_core::track::{edited_at, frame_image, track_render, EditKind, Provenance, TrackMode};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::jobs::{AffinityJobRequest, MaskSource};
use crate::state::{AppState, CoarseState, Pose};

pub const REVISION_HEADER: HeaderName = HeaderName::from_static("x-revision");

type AppResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> AppResult<T> {
    body.map(|Json(b)| b).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn check_time(t: f64) -> AppResult<f64> {
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(ApiError::bad_request(format!("time must be in [0, 1], got {t}")))
    }
}

/// Runs CPU-heavy work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> AppResult<T> + Send + 'static) -> AppResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker panicked: {e}")))?
}

pub async fn health(State(state): Shared) -> Json<Value> {
    Json(json!({ "ok": true, "revision": state.snapshot().revision }))
}

pub async fn get_state(State(state): Shared) -> Json<Value> {
    let snap = state.snapshot();
    let model = snap.model.as_ref().map(|m| json!({ "gaussians": m.set.len(), "sh_degree": m.set.sh_degree }));
    let coarse = snap.coarse.as_ref().map(|c| {
        json!({
            "k": c.seg.k,
            "seed": c.seg.seed,
            "centroids": c.seg.centroids,
            "counts": c.seg.counts(),
            "kept": c.members.iter().map(Vec::len).collect::<Vec<_>>(),
        })
    });
    let affinity: Vec<Value> = snap.affinity.iter().map(|a| json!({ "label": a.parent, "time": a.field.time })).collect();
    let dataset = state.dataset.as_ref().map(|d| {
        let m = &d.manifest;
        json!({
            "views": m.views.len(),
            "train_views": m.views_of(dynsplat_core::synth::Split::Train),
            "test_views": m.views_of(dynsplat_core::synth::Split::Test),
            "timesteps": m.timesteps,
            "width": m.width,
            "height": m.height,
        })
    });
    Json(json!({
        "revision": snap.revision,
        "model": model,
        "coarse": coarse,
        "affinity": affinity,
        "dataset": dataset,
        "segments": snap.registry.segments.len(),
        "groups": snap.registry.groups.len(),
        "edits": snap.registry.edits.len(),
    }))
}

pub async fn get_segments(State(state): Shared) -> Json<Value> {
    let snap = state.snapshot();
    let r = &snap.registry;
    Json(json!({
        "revision": snap.revision,
        "segments": r.segments.values().collect::<Vec<_>>(),
        "groups": r.groups.values().collect::<Vec<_>>(),
        "edits": r.edits,
    }))
}

/// `GET /frame` parameters. The camera is `view`, or a pose given by
/// `px,py,pz` (position), `tx,ty,tz` (target), `fov` in degrees and
/// `width`, `height`.
#[derive(Debug, Deserialize)]
pub struct FrameQuery {
    pub time: f64,
    pub view: Option<usize>,
    pub px: Option<f64>,
    pub py: Option<f64>,
    pub pz: Option<f64>,
    pub tx: Option<f64>,
    pub ty: Option<f64>,
    pub tz: Option<f64>,
    pub fov: Option<f64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub mode: Option<String>,
    /// Comma-separated segment or group ids.
    pub segments: Option<String>,
}

impl FrameQuery {
    fn pose(&self) -> AppResult<Option<Pose>> {
        match (self.px, self.py, self.pz) {
            (None, None, None) => Ok(None),
            (Some(x), Some(y), Some(z)) => Ok(Some(Pose {
                position: [x, y, z],
                look_at: [self.tx.unwrap_or(0.0), self.ty.unwrap_or(0.0), self.tz.unwrap_or(0.0)],
                up: [0.0, 0.0, 1.0],
                fov_deg: self.fov.unwrap_or(40.0),
                width: self.width.unwrap_or(256),
                height: self.height.unwrap_or(256),
            })),
            _ => Err(ApiError::bad_request("a pose needs all of px, py and pz")),
        }
    }
}

fn parse_ids(text: &str) -> AppResult<Vec<u64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| ApiError::bad_request(format!("bad segment id {s:?}"))))
        .collect()
}

pub async fn get_frame(State(state): Shared, query: Result<Query<FrameQuery>, QueryRejection>) -> AppResult<Response> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let snap = state.snapshot();
    let model = snap.model()?;
    let time = check_time(q.time)?;
    let camera = state.camera(q.view, q.pose()?.as_ref())?;
    let mode: TrackMode = q.mode.as_deref().unwrap_or("all").parse().map_err(|e: dynsplat_core::Error| ApiError::bad_request(e.to_string()))?;
    let selection = q.segments.as_deref().map(parse_ids).transpose()?.unwrap_or_default();
    let unknown: Vec<u64> = selection.iter().copied().filter(|&id| !snap.registry.contains(id)).collect();
    if !unknown.is_empty() {
        return Err(ApiError::bad_request(format!("unknown segment ids {unknown:?}")));
    }
    let settings = state.settings.clone();
    let revision = snap.revision;
    let png = blocking(move || {
        let frame = track_render(&model, &snap.registry, &selection, time, &camera, mode, &settings).map_err(ApiError::unknown_as_bad_request)?;
        Ok(frame_image(&frame).to_png_bytes()?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png".to_string()), (REVISION_HEADER, revision.to_string())], png).into_response())
}

fn default_seed() -> u64 {
    0
}

fn default_directions() -> usize {
    DEFAULT_DIRECTIONS
}

fn default_min_neighbors() -> usize {
    DEFAULT_MIN_NEIGHBORS
}

#[derive(Debug, Deserialize)]
pub struct CoarseRequest {
    pub k: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_directions")]
    pub directions: usize,
    /// Outlier radius; omitted means the per-cluster default.
    pub radius: Option<f64>,
    #[serde(default = "default_min_neighbors")]
    pub min_neighbors: usize,
}

#[derive(Debug, Serialize)]
pub struct LabelSummary {
    pub label: u32,
    pub count: usize,
    pub kept: usize,
    pub centroid: [f64; 3],
}

pub async fn post_coarse(State(state): Shared, body: Result<Json<CoarseRequest>, JsonRejection>) -> AppResult<Json<Value>> {
    let req = json_body(body)?;
    if let Some(r) = req.radius {
        if !(r > 0.0 && r.is_finite()) {
            return Err(ApiError::bad_request(format!("radius must be positive, got {r}")));
        }
    }
    let model = state.snapshot().model()?;
    let coarse = blocking(move || {
        let seg = CoarseSegmentation::compute(&model.set, req.k, req.seed, req.directions)?;
        Ok(CoarseState::new(seg, &model, req.radius, req.min_neighbors)?)
    })
    .await?;
    let counts = coarse.seg.counts();
    let labels: Vec<LabelSummary> = (0..coarse.seg.k)
        .map(|l| LabelSummary {
            label: l as u32,
            count: counts[l],
            kept: coarse.members[l].len(),
            centroid: coarse.seg.centroids[l],
        })
        .collect();
    let (k, seed) = (coarse.seg.k, coarse.seg.seed);
    let (_, revision) = state.commit(|s| {
        s.coarse = Some(Arc::new(coarse));
        // Labels are renumbered, so fields keyed by label no longer apply.
        s.affinity = Arc::new(Vec::new());
        Ok(())
    })?;
    Ok(Json(json!({ "k": k, "seed": seed, "labels": labels, "revision": revision })))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[default]
    Coarse,
    Fine,
}

#[derive(Debug, Deserialize)]
pub struct PickRequest {
    pub view: Option<usize>,
    pub pose: Option<Pose>,
    pub pixel: [usize; 2],
    pub time: f64,
    #[serde(default)]
    pub level: Level,
    pub scale: Option<f64>,
    pub tau: Option<f64>,
    pub name: Option<String>,
}

pub async fn post_pick(State(state): Shared, body: Result<Json<PickRequest>, JsonRejection>) -> AppResult<Response> {
    let req = json_body(body)?;
    let snap = state.snapshot();
    let model = snap.model()?;
    let coarse = snap.coarse()?;
    let time = check_time(req.time)?;
    let camera = state.camera(req.view, req.pose.as_ref())?;
    let [x, y] = req.pixel;
    if x >= camera.width || y >= camera.height {
        return Err(ApiError::bad_request(format!("pixel ({x}, {y}) outside the {}x{} image", camera.width, camera.height)));
    }
    let tau = req.tau.unwrap_or(DEFAULT_TAU);
    if !(tau > -1.0 && tau <= 1.0) {
        return Err(ApiError::bad_request(format!("tau must be in (-1, 1], got {tau}")));
    }
    let settings = state.settings.clone();
    let level = req.level;
    let picked = blocking(move || {
        // Pick on what the user sees: the deformed, edited scene.
        let shown = edited_at(&model, &snap.registry, time)?;
        let frame = render(&shown, &camera, Payload::Color, &settings, true);
        let Some(label) = frame.pick(x, y).and_then(|id| coarse.seg.label_of(id)) else {
            return Ok(None);
        };
        let deformed = model.at_time(time);
        let members = &coarse.members[label as usize];
        let (ids, provenance) = match level {
            Level::Coarse => (members.clone(), Provenance::Coarse { label }),
            Level::Fine => {
                let field = snap.affinity_for(label, time).ok_or_else(|| {
                    ApiError::conflict(format!(
                        "no affinity field for coarse label {label} at time {time}; POST /affinity/train {{\"label\": {label}, \"time\": {time}, \"masks\": ...}} and retry when the job is done"
                    ))
                })?;
                let scale = req.scale.ok_or_else(|| ApiError::bad_request("a fine pick needs a scale"))?;
                if !(scale >= 0.0 && scale.is_finite()) {
                    return Err(ApiError::bad_request(format!("scale must be non-negative, got {scale}")));
                }
                let keep: HashSet<u64> = members.iter().copied().collect();
                let parent_set = deformed.select_ids(&keep);
                match segment_by_click(field, label as usize, &parent_set, &camera, x, y, scale, tau, &settings) {
                    Some(f) if !f.ids.is_empty() => (f.ids, Provenance::Fine { parent: label, scale, tau }),
                    _ => return Ok(None),
                }
            }
        };
        Ok(Some((label, ids, provenance, deformed)))
    })
    .await?;
    let Some((label, ids, provenance, deformed)) = picked else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let count = ids.len();
    let name = req.name.unwrap_or_else(|| match level {
        Level::Coarse => format!("coarse {label}"),
        Level::Fine => format!("fine {label}"),
    });
    let (id, revision) = state.commit(|s| Ok(Arc::make_mut(&mut s.registry).add_segment(name, ids, provenance, time, &deformed)?))?;
    let level = match level {
        Level::Coarse => "coarse",
        Level::Fine => "fine",
    };
    Ok(Json(json!({ "segment": id, "gaussians": count, "label": label, "level": level, "revision": revision })).into_response())
}

pub async fn post_affinity_train(State(state): Shared, body: Result<Json<AffinityJobRequest>, JsonRejection>) -> AppResult<Response> {
    let req = json_body(body)?;
    let snap = state.snapshot();
    snap.model()?;
    let coarse = snap.coarse()?;
    check_time(req.time)?;
    if req.label as usize >= coarse.seg.k {
        return Err(ApiError::bad_request(format!("label {} out of range for k = {}", req.label, coarse.seg.k)));
    }
    req.config.validate()?;
    let ds = state.dataset()?;
    if let MaskSource::Gt { segment, .. } = &req.masks {
        if ds.manifest.scene.blobs_of_segment(*segment).is_empty() {
            return Err(ApiError::bad_request(format!("dataset scene has no segment {segment}")));
        }
    }
    let id = state.jobs.submit(req);
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": id }))).into_response())
}

pub async fn get_job(State(state): Shared, Path(id): Path<u64>) -> AppResult<Json<Value>> {
    let job = state.jobs.get(id).ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))?;
    Ok(Json(serde_json::to_value(job).expect("job info serializes")))
}

pub async fn get_jobs(State(state): Shared) -> Json<Value> {
    Json(json!({ "jobs": state.jobs.list() }))
}

pub async fn post_edit(State(state): Shared, Path(id): Path<u64>, body: Result<Json<EditKind>, JsonRejection>) -> AppResult<Json<Value>> {
    let kind = json_body(body)?;
    let (_, revision) = state.commit(|s| Ok(Arc::make_mut(&mut s.registry).add_edit(id, kind)?))?;
    Ok(Json(json!({ "revision": revision })))
}

#[derive(Debug, Deserialize)]
pub struct GroupRequest {
    pub ids: Vec<u64>,
    pub name: Option<String>,
    /// Time whose deformation sets the pivot; defaults to the first
    /// member's creation time.
    pub time: Option<f64>,
}

pub async fn post_group(State(state): Shared, body: Result<Json<GroupRequest>, JsonRejection>) -> AppResult<Json<Value>> {
    let req = json_body(body)?;
    let snap = state.snapshot();
    let model = snap.model()?;
    if let Some(&missing) = req.ids.iter().find(|id| !snap.registry.segments.contains_key(id)) {
        return Err(ApiError::not_found(format!("unknown segment id {missing}")));
    }
    let time = match req.time {
        Some(t) => check_time(t)?,
        None => req.ids.first().map(|id| snap.registry.segments[id].created_at).unwrap_or(0.0),
    };
    let deformed = blocking(move || Ok(model.at_time(time))).await?;
    let name = req.name.unwrap_or_else(|| "group".into());
    let ((id, count), revision) = state.commit(|s| {
        let reg = Arc::make_mut(&mut s.registry);
        let id = reg.add_group(name, req.ids, &deformed)?;
        Ok((id, reg.resolve(id)?.len()))
    })?;
    Ok(Json(json!({ "group": id, "gaussians": count, "revision": revision })))
}

pub async fn delete_segment(State(state): Shared, Path(id): Path<u64>) -> AppResult<Json<Value>> {
    let (_, revision) = state.commit(|s| Ok(Arc::make_mut(&mut s.registry).remove(id)?))?;
    Ok(Json(json!({ "revision": revision })))
}
