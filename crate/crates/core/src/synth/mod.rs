//! Synthetic ground truth: analytic volumes, a ray-marching renderer and
//! dataset files.

pub mod cameras;
pub mod dataset;
pub mod dvr;
pub mod scene;

pub use cameras::{fibonacci_cameras, fibonacci_sphere, spiral_test_cameras, Intrinsics};
pub use dataset::{dataset_digest, write_dataset, Dataset, DatasetManifest, Frame, GenConfig, Split};
pub use dvr::{dvr_render, isolated_mask, DvrOutput};
pub use scene::{AnalyticScene, Blob};
