//! Background affinity training. One worker thread runs jobs FIFO; status
//! only moves forward through queued, running and done or failed.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, Weak};

use dynsplat_core::checkpoint::AffinityEntry;
use dynsplat_core::scene::Camera;
use dynsplat_core::segment::affinity::{train_affinity, AffinityConfig};
use dynsplat_core::segment::masks::{ingest_masks, DirectoryMaskProvider, GtMaskProvider, MaskProvider, DEFAULT_NMS_IOU};
use dynsplat_core::synth::Split;
use serde::{Deserialize, Serialize};

use crate::state::AppState;

/// Progress is published every this many iterations.
const PROGRESS_EVERY: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSource {
    /// Ground-truth masks of a dataset segment's leaf blobs on the train views.
    Gt {
        segment: u32,
        #[serde(default)]
        union: bool,
    },
    /// A mask directory (`index.json` plus PNGs) on the server's filesystem.
    Dir { path: PathBuf },
}

fn default_nms() -> f64 {
    DEFAULT_NMS_IOU
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityJobRequest {
    pub label: u32,
    pub time: f64,
    pub masks: MaskSource,
    #[serde(default)]
    pub config: AffinityConfig,
    #[serde(default = "default_nms")]
    pub nms_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobInfo {
    pub id: u64,
    pub status: JobStatus,
    pub label: u32,
    pub time: f64,
    pub iteration: usize,
    pub iterations: usize,
    pub loss: Option<f64>,
    pub error: Option<String>,
    /// Revision that published the trained field.
    pub revision: Option<u64>,
}

pub(crate) struct Jobs {
    table: Mutex<BTreeMap<u64, JobInfo>>,
    next: AtomicU64,
    tx: Sender<(u64, AffinityJobRequest)>,
}

impl Jobs {
    pub(crate) fn new() -> (Self, Receiver<(u64, AffinityJobRequest)>) {
        let (tx, rx) = channel();
        let jobs = Jobs {
            table: Mutex::new(BTreeMap::new()),
            next: AtomicU64::new(1),
            tx,
        };
        (jobs, rx)
    }

    pub(crate) fn submit(&self, request: AffinityJobRequest) -> u64 {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        self.table.lock().expect("job table").insert(
            id,
            JobInfo {
                id,
                status: JobStatus::Queued,
                label: request.label,
                time: request.time,
                iteration: 0,
                iterations: request.config.iterations,
                loss: None,
                error: None,
                revision: None,
            },
        );
        // The worker holds the receiver for as long as the state lives.
        let _ = self.tx.send((id, request));
        id
    }

    pub fn get(&self, id: u64) -> Option<JobInfo> {
        self.table.lock().expect("job table").get(&id).cloned()
    }

    pub fn list(&self) -> Vec<JobInfo> {
        self.table.lock().expect("job table").values().cloned().collect()
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut JobInfo)) {
        if let Some(j) = self.table.lock().expect("job table").get_mut(&id) {
            f(j);
        }
    }
}

pub(crate) fn spawn_worker(state: Weak<AppState>, rx: Receiver<(u64, AffinityJobRequest)>) {
    std::thread::Builder::new()
        .name("affinity-jobs".into())
        .spawn(move || {
            // Ends when the state, and with it the sender, is dropped.
            while let Ok((id, request)) = rx.recv() {
                let Some(state) = state.upgrade() else { break };
                state.jobs.update(id, |j| j.status = JobStatus::Running);
                let outcome = run(&state, id, &request);
                state.jobs.update(id, |j| match outcome {
                    Ok(revision) => {
                        j.status = JobStatus::Done;
                        j.revision = Some(revision);
                    }
                    Err(e) => {
                        log::warn!("affinity job {id} failed: {e}");
                        j.status = JobStatus::Failed;
                        j.error = Some(e);
                    }
                });
            }
        })
        .expect("spawn job worker");
}

fn run(state: &Arc<AppState>, id: u64, request: &AffinityJobRequest) -> Result<u64, String> {
    let snap = state.snapshot();
    let model = snap.model().map_err(|e| e.message)?;
    let coarse = snap.coarse().map_err(|e| e.message)?;
    let ds = state.dataset().map_err(|e| e.message)?;
    let members: HashSet<u64> = coarse
        .members
        .get(request.label as usize)
        .ok_or_else(|| format!("label {} out of range", request.label))?
        .iter()
        .copied()
        .collect();
    let set = model.at_time(request.time).select_ids(&members);
    let provider: Box<dyn MaskProvider> = match &request.masks {
        MaskSource::Gt { segment, union } => {
            let scene = &ds.manifest.scene;
            let mut p = GtMaskProvider::new(scene.clone(), scene.blobs_of_segment(*segment));
            p.include_union = *union;
            Box::new(p)
        }
        MaskSource::Dir { path } => Box::new(DirectoryMaskProvider::load(path).map_err(|e| e.to_string())?),
    };
    let views: Vec<(usize, Camera)> = ds.manifest.views_of(Split::Train).into_iter().map(|v| (v, ds.camera(v).clone())).collect();
    let masks = ingest_masks(provider.as_ref(), &set, &views, request.time, request.nms_iou, &state.settings).map_err(|e| e.to_string())?;
    let field = train_affinity(&masks, &set, ds.manifest.aabb, &request.config, &state.settings, |p| {
        if (p.iteration + 1) % PROGRESS_EVERY == 0 || p.iteration + 1 == request.config.iterations {
            state.jobs.update(id, |j| {
                j.iteration = p.iteration + 1;
                j.loss = Some(p.loss);
            });
        }
    })
    .map_err(|e| e.to_string())?;
    let label = request.label;
    let (_, revision) = state
        .commit(|s| {
            let entries = Arc::make_mut(&mut s.affinity);
            entries.retain(|a| !(a.parent == label && a.field.time == field.time));
            entries.push(AffinityEntry { parent: label, field });
            Ok(())
        })
        .map_err(|e| e.message)?;
    Ok(revision)
}
