//! HTTP front end over a trained model: frames, segmentation, tracking and
//! edits. Readers work on a published snapshot; every mutation publishes a
//! new one under the next revision. See `docs/api.md` for the reference.

pub mod error;
pub mod jobs;
pub mod routes;
pub mod state;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::routing::{delete, get, post};
use axum::Router;

pub use error::ApiError;
pub use jobs::{AffinityJobRequest, JobInfo, JobStatus, MaskSource};
pub use routes::REVISION_HEADER;
pub use state::{AppState, Pose, Snapshot};

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(routes::health))
        .route("/state", get(routes::get_state))
        .route("/segments", get(routes::get_segments))
        .route("/frame", get(routes::get_frame))
        .route("/segment/coarse", post(routes::post_coarse))
        .route("/segment/pick", post(routes::post_pick))
        .route("/segment/:id/edit", post(routes::post_edit))
        .route("/segment/:id", delete(routes::delete_segment))
        .route("/segments/group", post(routes::post_group))
        .route("/affinity/train", post(routes::post_affinity_train))
        .route("/job/:id", get(routes::get_job))
        .route("/jobs", get(routes::get_jobs))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
