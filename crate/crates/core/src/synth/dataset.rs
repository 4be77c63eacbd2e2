//! Multi-view, multi-timestep image datasets rendered from an analytic scene.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cameras::{fibonacci_cameras, spiral_test_cameras, Intrinsics, DEFAULT_ELEVATION_BAND};
use super::dvr::{dvr_render, isolated_mask};
use super::scene::AnalyticScene;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::scene::{Aabb, Camera};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Mask pixel value for background. Segment `s` is stored as `s + 1`.
pub const BACKGROUND_LABEL: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub split: Split,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub view: usize,
    pub time_index: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene: AnalyticScene,
    pub width: usize,
    pub height: usize,
    pub timesteps: Vec<f64>,
    pub aabb: Aabb,
    pub seed: u64,
    pub image_pattern: String,
    pub mask_pattern: String,
    pub views: Vec<ViewEntry>,
    pub frames: Vec<FrameEntry>,
}

impl DatasetManifest {
    pub fn views_of(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&v| self.views[v].split == split).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn image_name(view: usize, time_index: usize) -> String {
    format!("img_v{view:03}_t{time_index:03}.png")
}

pub fn mask_name(view: usize, time_index: usize) -> String {
    format!("mask_v{view:03}_t{time_index:03}.png")
}

/// Generation parameters. Cameras sit on a sphere of `camera_radius` around
/// the scene box center.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub train_views: usize,
    pub test_views: usize,
    pub timesteps: usize,
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
    pub camera_radius: f64,
    pub spiral_turns: f64,
    pub elevation_band: [f64; 2],
    /// Nonzero seeds rotate both rigs by a random azimuth.
    pub seed: u64,
}

impl Default for GenConfig {
    /// The canonical desk-scale fixture.
    fn default() -> Self {
        GenConfig {
            train_views: 20,
            test_views: 10,
            timesteps: 5,
            width: 64,
            height: 64,
            fov_y: 40f64.to_radians(),
            camera_radius: 3.5,
            spiral_turns: 1.0,
            elevation_band: DEFAULT_ELEVATION_BAND,
            seed: 0,
        }
    }
}

/// Evenly spaced timesteps over the range, both ends included.
pub fn timestep_grid(range: [f64; 2], n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![range[0]],
        _ => (0..n).map(|i| range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn rig_azimuth(seed: u64) -> f64 {
    if seed == 0 {
        0.0
    } else {
        ChaCha8Rng::seed_from_u64(seed).gen_range(0.0..std::f64::consts::TAU)
    }
}

pub fn build_views(scene: &AnalyticScene, cfg: &GenConfig) -> Result<Vec<ViewEntry>> {
    let intr = Intrinsics {
        fov_y: cfg.fov_y,
        width: cfg.width,
        height: cfg.height,
    };
    let center = Vector3::from(scene.aabb.center());
    let az = rig_azimuth(cfg.seed);
    let mut views: Vec<ViewEntry> = fibonacci_cameras(cfg.train_views, cfg.camera_radius, center, az, intr)?
        .into_iter()
        .map(|camera| ViewEntry {
            split: Split::Train,
            camera,
        })
        .collect();
    if cfg.test_views > 0 {
        let test = spiral_test_cameras(
            cfg.test_views,
            cfg.camera_radius,
            center,
            cfg.spiral_turns,
            cfg.elevation_band,
            az,
            intr,
        )?;
        views.extend(test.into_iter().map(|camera| ViewEntry {
            split: Split::Test,
            camera,
        }));
    }
    Ok(views)
}

fn write_labels(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(enc, labels, width as u32, height as u32, image::ExtendedColorType::L8).map_err(
        |e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        },
    )?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

/// Renders every (view, timestep) pair and writes images, label masks and
/// the manifest into `out`.
pub fn write_dataset(scene: &AnalyticScene, cfg: &GenConfig, out: &Path) -> Result<DatasetManifest> {
    scene.validate()?;
    if scene.blobs.iter().any(|b| b.segment >= u8::MAX as u32) {
        return Err(Error::InvalidArgument("segment ids must be below 255 to fit a label mask".into()));
    }
    if cfg.timesteps == 0 {
        return Err(Error::InvalidArgument("need at least one timestep".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let views = build_views(scene, cfg)?;
    let timesteps = timestep_grid(scene.time_range, cfg.timesteps);
    let jobs: Vec<(usize, usize)> = (0..views.len()).flat_map(|v| (0..timesteps.len()).map(move |k| (v, k))).collect();

    let rendered: Vec<(Image, Vec<u8>)> = jobs
        .par_iter()
        .map(|&(v, k)| {
            let r = dvr_render(scene, &views[v].camera, timesteps[k]);
            let labels = r
                .segment_ids
                .iter()
                .map(|s| s.map_or(BACKGROUND_LABEL, |s| s as u8 + 1))
                .collect();
            (r.image, labels)
        })
        .collect();

    let mut frames = Vec::with_capacity(jobs.len());
    for (&(v, k), (img, labels)) in jobs.iter().zip(rendered) {
        let entry = FrameEntry {
            view: v,
            time_index: k,
            image: image_name(v, k),
            mask: mask_name(v, k),
        };
        img.save_png(&out.join(&entry.image))?;
        write_labels(&out.join(&entry.mask), cfg.width, cfg.height, &labels)?;
        frames.push(entry);
    }
    let manifest = DatasetManifest {
        scene: scene.clone(),
        width: cfg.width,
        height: cfg.height,
        timesteps,
        aabb: scene.aabb,
        seed: cfg.seed,
        image_pattern: "img_v{view:03}_t{time:03}.png".into(),
        mask_pattern: "mask_v{view:03}_t{time:03}.png".into(),
        views,
        frames,
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// SHA-256 over the manifest and every file it references, in manifest
/// order, each prefixed by its name and byte length. Hex encoded.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut hasher = Sha256::new();
    let mut feed = |name: &str| -> Result<()> {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        Ok(())
    };
    feed(MANIFEST_FILE)?;
    for f in &manifest.frames {
        feed(&f.image)?;
        feed(&f.mask)?;
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// One loaded frame.
#[derive(Clone, Debug)]
pub struct Frame {
    pub view: usize,
    pub time_index: usize,
    pub time: f64,
    pub image: Image,
    /// Per pixel stored label, `0` for background.
    pub labels: Vec<u8>,
}

impl Frame {
    pub fn segment_at(&self, x: usize, y: usize) -> Option<u32> {
        match self.labels[y * self.image.width + x] {
            BACKGROUND_LABEL => None,
            l => Some(l as u32 - 1),
        }
    }
}

/// A dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for f in &manifest.frames {
            if f.view >= manifest.views.len() || f.time_index >= manifest.timesteps.len() {
                return Err(Error::InvalidArgument(format!("frame {} references a missing view or timestep", f.image)));
            }
            let image = Image::load_png(&dir.join(&f.image))?;
            let (w, h, labels) = read_labels(&dir.join(&f.mask))?;
            if (image.width, image.height) != (manifest.width, manifest.height) || (w, h) != (image.width, image.height) {
                return Err(Error::ShapeMismatch(format!("{} does not match the manifest resolution", f.image)));
            }
            frames.push(Frame {
                view: f.view,
                time_index: f.time_index,
                time: manifest.timesteps[f.time_index],
                image,
                labels,
            });
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            frames,
        })
    }

    pub fn camera(&self, view: usize) -> &Camera {
        &self.manifest.views[view].camera
    }

    pub fn frames_of(&self, split: Split) -> Vec<&Frame> {
        self.frames
            .iter()
            .filter(|f| self.manifest.views[f.view].split == split)
            .collect()
    }

    pub fn frame(&self, view: usize, time_index: usize) -> Option<&Frame> {
        self.frames.iter().find(|f| f.view == view && f.time_index == time_index)
    }

    /// Silhouette (alpha ≥ 0.5) of a segment rendered alone. A parent
    /// segment covers all of its children.
    pub fn segment_mask(&self, segment: u32, view: usize, time: f64) -> Result<Mask> {
        let blobs = self.manifest.scene.blobs_of_segment(segment);
        if blobs.is_empty() {
            return Err(Error::UnknownSegment(segment as u64));
        }
        Ok(isolated_mask(&self.manifest.scene, &blobs, self.camera(view), time, 0.5))
    }
}
