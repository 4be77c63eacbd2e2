//! Session state: an immutable snapshot per revision plus a single writer.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use dynsplat_core::checkpoint::{AffinityEntry, Checkpoint};
use dynsplat_core::raster::RenderSettings;
use dynsplat_core::scene::Camera;
use dynsplat_core::segment::affinity::AffinityField;
use dynsplat_core::segment::coarse::{clean_members, CoarseSegmentation, DEFAULT_MIN_NEIGHBORS};
use dynsplat_core::synth::Dataset;
use dynsplat_core::track::Registry;
use dynsplat_core::train::Model;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::jobs::Jobs;

/// A coarse segmentation with its outlier-free member lists.
#[derive(Clone, Debug)]
pub struct CoarseState {
    pub seg: CoarseSegmentation,
    /// Per label, ascending ids with outliers removed.
    pub members: Vec<Vec<u64>>,
    /// Fixed radius, or `None` for the per-cluster default.
    pub radius: Option<f64>,
    pub min_neighbors: usize,
}

impl CoarseState {
    pub fn new(seg: CoarseSegmentation, model: &Model, radius: Option<f64>, min_neighbors: usize) -> dynsplat_core::Result<Self> {
        let members = clean_members(&seg, &model.set, radius, min_neighbors)?;
        Ok(CoarseState {
            seg,
            members,
            radius,
            min_neighbors,
        })
    }
}

/// Everything a request reads. Published whole, so a reader sees one
/// revision throughout.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub revision: u64,
    pub model: Option<Arc<Model>>,
    pub coarse: Option<Arc<CoarseState>>,
    pub affinity: Arc<Vec<AffinityEntry>>,
    pub registry: Arc<Registry>,
}

impl Snapshot {
    pub fn model(&self) -> Result<Arc<Model>, ApiError> {
        self.model.clone().ok_or_else(ApiError::no_model)
    }

    pub fn coarse(&self) -> Result<Arc<CoarseState>, ApiError> {
        self.coarse
            .clone()
            .ok_or_else(|| ApiError::conflict("no coarse segmentation yet; POST /segment/coarse {\"k\": K} first"))
    }

    pub fn affinity_for(&self, label: u32, time: f64) -> Option<&AffinityField> {
        self.affinity.iter().find(|a| a.parent == label && a.field.time == time).map(|a| &a.field)
    }
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_fov() -> f64 {
    40.0
}

fn default_size() -> usize {
    256
}

/// Free camera: position, look-at target and vertical field of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    #[serde(default)]
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
}

impl Pose {
    pub fn camera(&self) -> Result<Camera, ApiError> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(ApiError::bad_request(format!("fov_deg must be in (0, 180), got {}", self.fov_deg)));
        }
        if self.width == 0 || self.height == 0 || self.width > 4096 || self.height > 4096 {
            return Err(ApiError::bad_request(format!("image size {}x{} out of range", self.width, self.height)));
        }
        Camera::look_at(
            Vector3::from(self.position),
            Vector3::from(self.look_at),
            Vector3::from(self.up),
            self.fov_deg.to_radians(),
            self.width,
            self.height,
        )
        .map_err(|e| ApiError::bad_request(e.to_string()))
    }
}

pub struct AppState {
    current: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
    pub dataset: Option<Arc<Dataset>>,
    pub settings: RenderSettings,
    /// Registry file rewritten on every commit.
    sidecar: Option<PathBuf>,
    pub(crate) jobs: Jobs,
}

impl AppState {
    /// Builds the session and starts the job worker. The registry is read
    /// from `sidecar` when that file exists.
    pub fn new(checkpoint: Option<Checkpoint>, dataset: Option<Dataset>, sidecar: Option<PathBuf>) -> dynsplat_core::Result<Arc<Self>> {
        let registry = match &sidecar {
            Some(p) if p.exists() => Registry::load(p)?,
            _ => Registry::new(),
        };
        let (model, coarse, affinity) = match checkpoint {
            Some(ck) => {
                let coarse = match ck.coarse {
                    Some(seg) => Some(Arc::new(CoarseState::new(seg, &ck.model, None, DEFAULT_MIN_NEIGHBORS)?)),
                    None => None,
                };
                (Some(Arc::new(ck.model)), coarse, ck.affinity)
            }
            None => (None, None, Vec::new()),
        };
        let snapshot = Snapshot {
            revision: 0,
            model,
            coarse,
            affinity: Arc::new(affinity),
            registry: Arc::new(registry),
        };
        let (jobs, rx) = Jobs::new();
        let state = Arc::new(AppState {
            current: RwLock::new(Arc::new(snapshot)),
            writer: Mutex::new(()),
            dataset: dataset.map(Arc::new),
            settings: RenderSettings::default(),
            sidecar,
            jobs,
        });
        crate::jobs::spawn_worker(Arc::downgrade(&state), rx);
        Ok(state)
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock").clone()
    }

    /// Applies `f` to a copy of the latest snapshot and publishes it under
    /// the next revision. Nothing is published when `f` fails.
    pub fn commit<T>(&self, f: impl FnOnce(&mut Snapshot) -> Result<T, ApiError>) -> Result<(T, u64), ApiError> {
        let _guard = self.writer.lock().expect("writer lock");
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        next.revision += 1;
        if let Some(path) = &self.sidecar {
            next.registry.save(path)?;
        }
        let revision = next.revision;
        *self.current.write().expect("snapshot lock") = Arc::new(next);
        Ok((out, revision))
    }

    pub fn dataset(&self) -> Result<Arc<Dataset>, ApiError> {
        self.dataset.clone().ok_or_else(|| ApiError::bad_request("the service was started without a dataset; named views are unavailable"))
    }

    /// Camera from a dataset view or an explicit pose; exactly one is allowed.
    pub fn camera(&self, view: Option<usize>, pose: Option<&Pose>) -> Result<Camera, ApiError> {
        match (view, pose) {
            (Some(v), None) => {
                let ds = self.dataset()?;
                if v >= ds.manifest.views.len() {
                    return Err(ApiError::bad_request(format!("view {v} out of range (dataset has {})", ds.manifest.views.len())));
                }
                Ok(ds.camera(v).clone())
            }
            (None, Some(p)) => p.camera(),
            (Some(_), Some(_)) => Err(ApiError::bad_request("give either a view or a pose, not both")),
            (None, None) => Err(ApiError::bad_request("a view or a pose is required")),
        }
    }
}
