use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dynsplat_core::checkpoint::Checkpoint;
use dynsplat_core::deform::EncoderKind;
use dynsplat_core::image::Image;
use dynsplat_core::raster::{render, Payload, RenderSettings};
use dynsplat_core::scene::Camera;
use dynsplat_core::segment::affinity::{segment_by_click, train_affinity, AffinityConfig};
use dynsplat_core::segment::coarse::{clean_members, CoarseSegmentation, DEFAULT_MIN_NEIGHBORS};
use dynsplat_core::segment::masks::{ingest_masks, write_mask_dir, DirectoryMaskProvider, GtMaskProvider, MaskProvider, MaskRequest};
use dynsplat_core::synth::{write_dataset, AnalyticScene, Dataset, GenConfig, Split};
use dynsplat_core::track::{edited_at, frame_image, sidecar_path, track_render, velocity_render, EditKind, Provenance, Registry, TrackMode};
use dynsplat_core::train::{evaluate, train, LossKind, TrainConfig};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::*;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Segment(SegmentCommand::Coarse(a)) => segment_coarse(a),
        Command::Segment(SegmentCommand::Fine(a)) => segment_fine(a),
        Command::Segment(SegmentCommand::Pick(a)) => segment_pick(a),
        Command::GenMasks(a) => gen_masks(a),
        Command::Track(a) => track(a),
        Command::Edit(a) => edit(a),
        Command::Group(a) => group(a),
        Command::Velocity(a) => velocity(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn check_time(t: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&t), "time must be in [0, 1], got {t}");
    Ok(t)
}

fn registry_path(explicit: Option<PathBuf>, ckpt: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| sidecar_path(ckpt))
}

fn load_registry(path: &Path) -> Result<Registry> {
    if path.exists() {
        Registry::load(path).with_context(|| format!("loading segments {}", path.display()))
    } else {
        Ok(Registry::new())
    }
}

impl CameraArgs {
    fn camera(&self) -> Result<Camera> {
        match (self.view, &self.eye) {
            (Some(v), None) => {
                let data = self.data.as_deref().context("--view needs --data")?;
                let ds = load_dataset(data)?;
                ensure!(v < ds.manifest.views.len(), "view {v} out of range (dataset has {})", ds.manifest.views.len());
                Ok(ds.camera(v).clone())
            }
            (None, Some(eye)) => {
                ensure!(self.fov > 0.0 && self.fov < 180.0, "--fov must be in (0, 180)");
                let [w, h] = self.res.0;
                Ok(Camera::look_at(
                    Vector3::from(eye.0),
                    Vector3::from(self.target.0),
                    Vector3::z(),
                    self.fov.to_radians(),
                    w,
                    h,
                )?)
            }
            _ => bail!("give either --view (with --data) or --eye"),
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let scene = if a.scene == "blobs3" {
        AnalyticScene::blobs3()
    } else {
        let text = std::fs::read_to_string(&a.scene).with_context(|| format!("reading scene {}", a.scene))?;
        let scene: AnalyticScene = serde_json::from_str(&text).with_context(|| format!("parsing scene {}", a.scene))?;
        scene.validate()?;
        scene
    };
    let [width, height] = a.res.0;
    let cfg = GenConfig {
        train_views: a.views,
        test_views: a.test_views,
        timesteps: a.timesteps,
        width,
        height,
        seed: a.seed,
        ..GenConfig::default()
    };
    let manifest = write_dataset(&scene, &cfg, &a.out)?;
    log::info!(
        "wrote {} views x {} timesteps of {} to {}",
        manifest.views.len(),
        manifest.timesteps.len(),
        scene.name,
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.loss {
        cfg.loss = match l {
            LossArg::L2 => LossKind::L2,
            LossArg::L1 => LossKind::L1,
            LossArg::L2Dssim => LossKind::L2Dssim,
        };
    }
    if let Some(e) = a.encoder {
        cfg.encoder = match e {
            EncoderArg::Hybrid => EncoderKind::Hybrid,
            EncoderArg::Implicit => EncoderKind::Implicit,
        };
    }
    if a.no_tv {
        cfg.tv = false;
    }
    if a.no_warmup {
        cfg.warmup_iters = 0;
    }
    if a.no_opacity_deform {
        cfg.opacity_deform = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let ds = load_dataset(&a.data)?;
    let mut trace = match &a.trace {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let mut trace_error = None;
    let every = a.log_every.max(1);
    let (model, records) = train(&ds, &cfg, |r| {
        if (r.iteration + 1) % every == 0 {
            log::info!(
                "iter {:>6} {:<6} loss {:.5} psnr {:.2} gaussians {}",
                r.iteration + 1,
                r.stage.name(),
                r.loss,
                r.psnr,
                r.gaussians
            );
        }
        if let Some(w) = trace.as_mut() {
            let line = serde_json::to_string(r).expect("trace record serializes");
            if let Err(e) = writeln!(w, "{line}") {
                trace_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = trace_error {
        return Err(e).context("writing trace");
    }
    if let Some(mut w) = trace {
        w.flush().context("writing trace")?;
    }
    let mut ck = Checkpoint::new(model);
    ck.iteration = records.len();
    ck.config_hash = Some(cfg.hash());
    ck.save(&a.out)?;
    log::info!("wrote {} ({} Gaussians)", a.out.display(), ck.model.set.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    print_json(&evaluate(&ds, &ck.model, split, &RenderSettings::default())?)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelSummary {
    label: u32,
    count: usize,
    kept: usize,
    centroid: [f64; 3],
}

/// `segment coarse` output.
#[derive(Debug, Serialize, Deserialize)]
struct CoarseFile {
    k: usize,
    seed: u64,
    directions: usize,
    radius: Option<f64>,
    min_neighbors: usize,
    labels: Vec<LabelSummary>,
    /// Per label, ascending ids with outliers removed.
    members: Vec<Vec<u64>>,
    segmentation: CoarseSegmentation,
}

fn read_coarse(path: &Path) -> Result<CoarseFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn segment_coarse(a: CoarseArgs) -> Result<()> {
    if let Some(r) = a.radius {
        ensure!(r > 0.0 && r.is_finite(), "--radius must be positive, got {r}");
    }
    let ck = load_checkpoint(&a.ckpt)?;
    let seg = CoarseSegmentation::compute(&ck.model.set, a.k, a.seed, a.directions)?;
    let members = clean_members(&seg, &ck.model.set, a.radius, a.min_neighbors)?;
    let counts = seg.counts();
    let labels = (0..seg.k)
        .map(|l| LabelSummary {
            label: l as u32,
            count: counts[l],
            kept: members[l].len(),
            centroid: seg.centroids[l],
        })
        .collect();
    let file = CoarseFile {
        k: seg.k,
        seed: seg.seed,
        directions: seg.directions,
        radius: a.radius,
        min_neighbors: a.min_neighbors,
        labels,
        members,
        segmentation: seg,
    };
    std::fs::write(&a.out, serde_json::to_string_pretty(&file)?).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&file.labels)
}

fn segment_fine(a: FineArgs) -> Result<()> {
    let time = check_time(a.time)?;
    let mut ck = load_checkpoint(&a.ckpt)?;
    let coarse = read_coarse(&a.coarse)?;
    let members: HashSet<u64> = coarse
        .members
        .get(a.label as usize)
        .with_context(|| format!("label {} out of range for k = {}", a.label, coarse.k))?
        .iter()
        .copied()
        .collect();
    let ds = load_dataset(&a.data)?;
    let provider = DirectoryMaskProvider::load(&a.masks)?;
    let mut config = AffinityConfig::default();
    if let Some(v) = a.iterations {
        config.iterations = v;
    }
    if let Some(v) = a.batch {
        config.batch = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    config.validate()?;

    let settings = RenderSettings::default();
    let set = ck.model.at_time(time).select_ids(&members);
    let views = provider.views();
    if let Some(v) = views.iter().find(|&&v| v >= ds.manifest.views.len()) {
        bail!("mask directory names view {v}, but the dataset has {} views", ds.manifest.views.len());
    }
    let views: Vec<(usize, Camera)> = views.into_iter().map(|v| (v, ds.camera(v).clone())).collect();
    let masks = ingest_masks(&provider, &set, &views, time, a.nms_iou, &settings)?;
    log::info!("{} masks over {} views, max scale {:.3}", masks.mask_count(), views.len(), masks.max_scale());
    let total = config.iterations;
    let field = train_affinity(&masks, &set, ds.manifest.aabb, &config, &settings, |p| {
        if (p.iteration + 1) % 500 == 0 || p.iteration + 1 == total {
            log::info!("affinity iter {:>5}/{total} loss {:.5}", p.iteration + 1, p.loss);
        }
    })?;
    ck.coarse = Some(coarse.segmentation);
    ck.set_affinity(a.label, field);
    ck.save(&a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn segment_pick(a: PickArgs) -> Result<()> {
    let time = check_time(a.time)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let (seg, members) = match &a.coarse {
        Some(p) => {
            let f = read_coarse(p)?;
            (f.segmentation, f.members)
        }
        None => {
            let seg = ck.coarse.clone().context("the checkpoint has no coarse segmentation; pass --coarse seg.json")?;
            let members = clean_members(&seg, &ck.model.set, None, DEFAULT_MIN_NEIGHBORS)?;
            (seg, members)
        }
    };
    let camera = a.camera.camera()?;
    let [x, y] = a.pixel.0;
    ensure!(x < camera.width && y < camera.height, "pixel ({x}, {y}) outside the {}x{} image", camera.width, camera.height);
    ensure!(a.tau > -1.0 && a.tau <= 1.0, "--tau must be in (-1, 1]");

    let reg_path = registry_path(a.segments, &a.ckpt);
    let mut registry = load_registry(&reg_path)?;
    let settings = RenderSettings::default();
    let shown = edited_at(&ck.model, &registry, time)?;
    let frame = render(&shown, &camera, Payload::Color, &settings, true);
    let Some(label) = frame.pick(x, y).and_then(|id| seg.label_of(id)) else {
        println!("null");
        log::info!("no segment at pixel ({x}, {y})");
        return Ok(());
    };
    let deformed = ck.model.at_time(time);
    let label_members = &members[label as usize];
    let (ids, provenance) = match a.level {
        LevelArg::Coarse => (label_members.clone(), Provenance::Coarse { label }),
        LevelArg::Fine => {
            let scale = a.scale.context("a fine pick needs --scale")?;
            ensure!(scale >= 0.0 && scale.is_finite(), "--scale must be non-negative");
            let field = ck
                .affinity_for(label, time)
                .with_context(|| format!("no affinity field for label {label} at time {time}; run `segment fine` first"))?;
            let keep: HashSet<u64> = label_members.iter().copied().collect();
            let parent_set = deformed.select_ids(&keep);
            match segment_by_click(field, label as usize, &parent_set, &camera, x, y, scale, a.tau, &settings) {
                Some(f) if !f.ids.is_empty() => (f.ids, Provenance::Fine { parent: label, scale, tau: a.tau }),
                _ => {
                    println!("null");
                    log::info!("no fine segment at pixel ({x}, {y})");
                    return Ok(());
                }
            }
        }
    };
    let count = ids.len();
    let level = match a.level {
        LevelArg::Coarse => "coarse",
        LevelArg::Fine => "fine",
    };
    let name = a.name.unwrap_or_else(|| format!("{level} {label}"));
    let id = registry.add_segment(name, ids, provenance, time, &deformed)?;
    registry.save(&reg_path)?;
    print_json(&serde_json::json!({ "segment": id, "gaussians": count, "label": label, "level": level }))
}

fn gen_masks(a: GenMasksArgs) -> Result<()> {
    let time = check_time(a.time)?;
    let ds = load_dataset(&a.data)?;
    let scene = &ds.manifest.scene;
    let blobs = scene.blobs_of_segment(a.segment);
    ensure!(!blobs.is_empty(), "dataset scene has no segment {}", a.segment);
    let mut provider = GtMaskProvider::new(scene.clone(), blobs);
    provider.include_union = a.union;
    let mut out = Vec::new();
    for v in ds.manifest.views_of(Split::Train) {
        let camera = ds.camera(v);
        let blank = Image::new(camera.width, camera.height, 3);
        let masks = provider.masks(&MaskRequest {
            view: v,
            camera,
            time,
            image: &blank,
        })?;
        out.push((v, masks));
    }
    write_mask_dir(&a.out, &out)?;
    let n: usize = out.iter().map(|(_, m)| m.len()).sum();
    log::info!("wrote {n} masks over {} views to {}", out.len(), a.out.display());
    Ok(())
}

fn track(a: TrackArgs) -> Result<()> {
    let time = check_time(a.time)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let registry = load_registry(&registry_path(a.segments, &a.ckpt))?;
    let selection = a.select.unwrap_or_else(|| registry.segments.keys().copied().collect());
    let mode = match a.mode {
        ModeArg::All => TrackMode::All,
        ModeArg::Isolate => TrackMode::Isolate,
        ModeArg::Highlight => TrackMode::Highlight,
        ModeArg::HideOthers => TrackMode::HideOthers,
    };
    let camera = a.camera.camera()?;
    let frame = track_render(&ck.model, &registry, &selection, time, &camera, mode, &RenderSettings::default())?;
    frame_image(&frame).save_png(&a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn edit(a: EditArgs) -> Result<()> {
    let kind = match (a.recolor, a.opacity_scale, a.translate) {
        (Some(rgb), None, None) => EditKind::Recolor { rgb: rgb.0 },
        (None, Some(factor), None) => EditKind::OpacityScale { factor },
        (None, None, Some(t)) => EditKind::Affine {
            translation: t.0,
            scale: a.scale,
        },
        _ => bail!("give exactly one of --recolor, --opacity-scale or --translate"),
    };
    let mut registry = load_registry(&a.segments)?;
    registry.add_edit(a.segment, kind)?;
    registry.save(&a.segments)?;
    log::info!("{} edits on record", registry.edits.len());
    Ok(())
}

fn group(a: GroupArgs) -> Result<()> {
    let time = check_time(a.time)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let path = registry_path(a.segments, &a.ckpt);
    let mut registry = load_registry(&path)?;
    let id = registry.add_group(a.name, a.ids, &ck.model.at_time(time))?;
    let count = registry.resolve(id)?.len();
    registry.save(&path)?;
    print_json(&serde_json::json!({ "group": id, "gaussians": count }))
}

fn velocity(a: VelocityArgs) -> Result<()> {
    let time = check_time(a.time)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let camera = a.camera.camera()?;
    let (img, max) = velocity_render(&ck.model, time, &camera, &RenderSettings::default());
    img.save_png(&a.out)?;
    print_json(&serde_json::json!({ "max_abs_dx": max }))
}

fn serve(a: ServeArgs) -> Result<()> {
    let ck = a.ckpt.as_deref().map(load_checkpoint).transpose()?;
    let ds = a.data.as_deref().map(load_dataset).transpose()?;
    let sidecar = a.ckpt.as_deref().map(sidecar_path);
    let state = dynsplat_service::AppState::new(ck, ds, sidecar)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().with_context(|| format!("bad address {}:{}", a.host, a.port))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(dynsplat_service::serve(state, addr))?;
    Ok(())
}
