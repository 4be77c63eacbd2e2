//! Two-stage optimization: a canonical warm-up without time, then joint
//! training of the Gaussians and the deformation field.

pub mod config;
pub mod densify;
pub mod groups;
pub mod init;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{LossKind, TrainConfig};
pub use densify::{densify_prune, DensifyParams, DensifyReport, DensifyStats};
pub use groups::{GaussianAdam, GaussianLrs};
pub use init::random_init;

use crate::deform::{DeformField, Encoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss;
use crate::optim::Adam;
use crate::raster::{render, render_backward, GaussianGrads, Payload, RenderSettings};
use crate::scene::GaussianSet;
use crate::synth::{Dataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
        }
    }
}

/// One iteration's loss breakdown. `tv` and `dssim` are unweighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub view: usize,
    pub time: f64,
    pub loss: f64,
    pub photometric: f64,
    pub tv: f64,
    pub dssim: f64,
    pub psnr: f64,
    pub gaussians: usize,
}

/// Distance-based extent of the training rig: 1.1 × the largest camera
/// distance from the mean camera position.
pub fn rig_extent(dataset: &Dataset) -> f64 {
    let cams: Vec<Vector3<f64>> = dataset
        .manifest
        .views_of(Split::Train)
        .iter()
        .map(|&v| dataset.camera(v).position)
        .collect();
    if cams.is_empty() {
        return 1.0;
    }
    let center = cams.iter().sum::<Vector3<f64>>() / cams.len() as f64;
    let r = cams.iter().map(|c| (c - center).norm()).fold(0.0, f64::max);
    1.1 * if r > 0.0 { r } else { 1.0 }
}

/// A set plus its deformation field; either may be untrained.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub set: GaussianSet,
    pub field: DeformField,
}

impl Model {
    /// Random initial Gaussians and a zero-output field, seeded from `config.seed`.
    pub fn init(dataset: &Dataset, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = &dataset.manifest;
        let set = random_init(config.init_gaussians, &m.aabb, config.sh_degree, config.init_opacity, &mut rng);
        let field = DeformField::new(config.deform_config(), m.aabb.dilated(config.aabb_dilation), m.scene.time_range, &mut rng);
        Model { set, field }
    }

    pub fn at_time(&self, t: f64) -> GaussianSet {
        self.field.deform(&self.set, t)
    }
}

pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub config: TrainConfig,
    pub model: Model,
    pub settings: RenderSettings,
    pub trace: Vec<TraceRecord>,
    /// Global iteration: warm-up iterations come first.
    pub iteration: usize,
    adam: GaussianAdam,
    encoder_adam: Adam,
    decoder_adam: Adam,
    stats: DensifyStats,
    rng: ChaCha8Rng,
    train_frames: Vec<usize>,
    queue: Vec<usize>,
    extent: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(dataset, &config);
        Self::with_model(dataset, config, model, 0)
    }

    /// Resumes from `model` at global iteration `iteration` with fresh
    /// optimizer state.
    pub fn with_model(dataset: &'a Dataset, config: TrainConfig, model: Model, iteration: usize) -> Result<Self> {
        config.validate()?;
        let train_frames: Vec<usize> = (0..dataset.frames.len())
            .filter(|&i| dataset.manifest.views[dataset.frames[i].view].split == Split::Train)
            .collect();
        if train_frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let encoder_len = model.field.encoder.param_count();
        let decoder_len = model.field.decoder.param_count();
        Ok(Trainer {
            dataset,
            adam: GaussianAdam::new(&model.set),
            encoder_adam: Adam::new(encoder_len, config.lr_encoder),
            decoder_adam: Adam::new(decoder_len, config.lr_decoder),
            stats: DensifyStats::new(model.set.len()),
            // Distinct stream from initialization.
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15),
            extent: rig_extent(dataset),
            config,
            model,
            settings: RenderSettings::default(),
            trace: Vec::new(),
            iteration,
            train_frames,
            queue: Vec::new(),
        })
    }

    pub fn total_iters(&self) -> usize {
        self.config.total_iters()
    }

    pub fn stage(&self) -> Stage {
        if self.iteration < self.config.warmup_iters {
            Stage::Warmup
        } else {
            Stage::Joint
        }
    }

    /// Training frames are visited in shuffled epochs.
    fn next_frame(&mut self) -> usize {
        if self.queue.is_empty() {
            self.queue = self.train_frames.clone();
            self.queue.shuffle(&mut self.rng);
            self.queue.reverse();
        }
        self.queue.pop().expect("training frames are non-empty")
    }

    fn gaussian_lrs(&self) -> GaussianLrs {
        let c = &self.config;
        let progress = self.iteration as f64 / self.total_iters().max(1) as f64;
        GaussianLrs {
            means: c.lr_means * self.extent * c.lr_means_final_factor.powf(progress),
            rotations: c.lr_rotation,
            log_scales: c.lr_scale,
            sh_dc: c.lr_sh,
            sh_rest: c.lr_sh / c.sh_rest_lr_divisor,
            opacity: c.lr_opacity,
        }
    }

    /// Photometric loss (plus DSSIM when active) and its image gradient.
    fn image_loss(&self, rendered: &Image, target: &Image, dssim_on: bool) -> Result<(f64, f64, Vec<f64>)> {
        let (photo, mut grad) = match self.config.loss {
            LossKind::L1 => loss::l1_loss(rendered, target)?,
            LossKind::L2 | LossKind::L2Dssim => loss::l2_loss(rendered, target)?,
        };
        let mut dssim = 0.0;
        if dssim_on {
            let (d, g) = loss::dssim_loss(rendered, target)?;
            dssim = d;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += self.config.lambda_dssim * b;
            }
        }
        Ok((photo, dssim, grad))
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<TraceRecord> {
        let stage = self.stage();
        let fi = self.next_frame();
        let dataset = self.dataset;
        let frame = &dataset.frames[fi];
        let camera = dataset.camera(frame.view).clone();
        let time = frame.time;
        let target = &frame.image;

        let (rendered_set, cache) = match stage {
            Stage::Warmup => (None, None),
            Stage::Joint => {
                let (s, c) = self.model.field.forward(&self.model.set, time);
                (Some(s), Some(c))
            }
        };
        let render_set = rendered_set.as_ref().unwrap_or(&self.model.set);
        let out = render(render_set, &camera, Payload::Color, &self.settings, false);
        let rendered = Image::from_data(camera.width, camera.height, 3, out.output.image.clone())?;

        let joint_k = self.iteration.saturating_sub(self.config.warmup_iters);
        let dssim_on = stage == Stage::Joint && self.config.dssim_active(joint_k);
        let (photo, dssim, d_image) = self.image_loss(&rendered, target, dssim_on)?;
        let mse = if self.config.loss == LossKind::L1 { loss::l2_loss(&rendered, target)?.0 } else { photo };

        let mut grads: GaussianGrads = render_backward(render_set, &camera, &out, &d_image);
        let mut tv = 0.0;
        let mut loss_value = photo + if dssim_on { self.config.lambda_dssim * dssim } else { 0.0 };

        if let Some(cache) = cache {
            let (mut fg, d_mean) = self.model.field.backward(&self.model.set, &cache, &grads);
            if let (Encoder::Factorized(enc), Some(g)) = (&self.model.field.encoder, fg.encoder.as_mut()) {
                if self.config.tv && self.config.lambda_tv > 0.0 {
                    tv = enc.tv_backward(g, self.config.lambda_tv);
                    loss_value += self.config.lambda_tv * tv;
                }
            }
            for (g, d) in grads.means.iter_mut().zip(&d_mean) {
                for a in 0..3 {
                    g[a] += d[a];
                }
            }
            check_finite(loss_value, self.iteration, stage)?;
            let decay = self
                .config
                .lr_field_final_factor
                .powf(joint_k as f64 / self.config.joint_iters.max(1) as f64);
            if let (Encoder::Factorized(enc), Some(g)) = (&mut self.model.field.encoder, fg.encoder.as_ref()) {
                self.encoder_adam.lr = self.config.lr_encoder * decay;
                self.encoder_adam.update(enc.param_slices_mut(), g.param_slices());
            }
            self.decoder_adam.lr = self.config.lr_decoder * decay;
            self.decoder_adam.update(self.model.field.decoder.param_slices_mut(), fg.decoder.param_slices());
        } else {
            check_finite(loss_value, self.iteration, stage)?;
        }

        let lrs = self.gaussian_lrs();
        self.adam.step(&mut self.model.set, &grads, &lrs);
        self.stats.accumulate(&grads);

        let it = self.iteration;
        self.iteration += 1;
        let c = &self.config;
        if it >= c.densify_from && it < c.densify_until && self.iteration % c.densify_interval == 0 {
            let params = DensifyParams {
                grad_threshold: c.densify_grad_threshold,
                size_threshold: c.densify_size_fraction * self.extent,
                prune_opacity: c.prune_opacity,
                max_gaussians: c.max_gaussians,
            };
            let report = densify_prune(&mut self.model.set, &mut self.adam, &self.stats, &params, &mut self.rng);
            log::debug!(
                "iteration {}: cloned {}, split {}, pruned {}, {} Gaussians",
                self.iteration,
                report.cloned,
                report.split,
                report.pruned,
                self.model.set.len()
            );
            self.stats = DensifyStats::new(self.model.set.len());
        }

        let record = TraceRecord {
            iteration: it,
            stage,
            view: frame.view,
            time,
            loss: loss_value,
            photometric: photo,
            tv,
            dssim,
            psnr: loss::psnr_from_mse(mse),
            gaussians: self.model.set.len(),
        };
        self.trace.push(record.clone());
        Ok(record)
    }

    /// Steps until the schedule ends, calling `on_record` after each step.
    pub fn run(&mut self, mut on_record: impl FnMut(&TraceRecord)) -> Result<()> {
        while self.iteration < self.total_iters() {
            let r = self.step()?;
            on_record(&r);
        }
        Ok(())
    }

    /// Steps until the end of the warm-up stage.
    pub fn run_warmup(&mut self) -> Result<()> {
        while self.iteration < self.config.warmup_iters {
            self.step()?;
        }
        Ok(())
    }
}

fn check_finite(loss: f64, iteration: usize, stage: Stage) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            loss,
            iteration,
            stage: stage.name(),
        })
    }
}

/// Canonical warm-up only; returns the warmed set.
pub fn warmup(dataset: &Dataset, config: &TrainConfig) -> Result<GaussianSet> {
    let mut t = Trainer::new(dataset, config.clone())?;
    t.run_warmup()?;
    Ok(t.model.set)
}

/// Joint stage starting from a warmed model.
pub fn joint_train(dataset: &Dataset, model: Model, config: &TrainConfig) -> Result<(Model, Vec<TraceRecord>)> {
    let mut t = Trainer::with_model(dataset, config.clone(), model, config.warmup_iters)?;
    t.run(|_| {})?;
    Ok((t.model, t.trace))
}

/// Full schedule from initialization.
pub fn train(dataset: &Dataset, config: &TrainConfig, on_record: impl FnMut(&TraceRecord)) -> Result<(Model, Vec<TraceRecord>)> {
    let mut t = Trainer::new(dataset, config.clone())?;
    t.run(on_record)?;
    Ok((t.model, t.trace))
}

/// Per-timestep PSNR on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub timesteps: Vec<f64>,
    /// Mean over the split's views at each timestep.
    pub psnr_per_timestep: Vec<f64>,
    pub mean_psnr: f64,
    pub frames: usize,
}

pub fn evaluate(dataset: &Dataset, model: &Model, split: Split, settings: &RenderSettings) -> Result<EvalReport> {
    let timesteps = dataset.manifest.timesteps.clone();
    let mut sums = vec![0.0; timesteps.len()];
    let mut counts = vec![0usize; timesteps.len()];
    let mut deformed: Vec<Option<GaussianSet>> = vec![None; timesteps.len()];
    for f in dataset.frames_of(split) {
        let set = deformed[f.time_index].get_or_insert_with(|| model.at_time(f.time));
        let cam = dataset.camera(f.view);
        let out = render(set, cam, Payload::Color, settings, false);
        let img = Image::from_data(cam.width, cam.height, 3, out.output.image)?;
        sums[f.time_index] += loss::psnr(&img, &f.image)?;
        counts[f.time_index] += 1;
    }
    let frames: usize = counts.iter().sum();
    if frames == 0 {
        return Err(Error::EmptyDataset);
    }
    let per: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect();
    let valid: Vec<f64> = per.iter().copied().filter(|v| !v.is_nan()).collect();
    Ok(EvalReport {
        split,
        timesteps,
        mean_psnr: valid.iter().sum::<f64>() / valid.len() as f64,
        psnr_per_timestep: per,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{write_dataset, AnalyticScene, GenConfig};

    fn tiny_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            train_views: 4,
            test_views: 2,
            timesteps: 2,
            width: 16,
            height: 16,
            ..GenConfig::default()
        };
        write_dataset(&AnalyticScene::blobs3(), &cfg, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        (dir, ds)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            warmup_iters: 20,
            joint_iters: 20,
            dssim_iters: 5,
            init_gaussians: 60,
            max_gaussians: 100,
            densify_from: 10,
            densify_interval: 10,
            grid_res: 8,
            time_res: 4,
            rank_s: 4,
            rank_t: 2,
            decoder_hidden: vec![16],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_warmup_returns_initialization() {
        let (_d, ds) = tiny_dataset();
        let cfg = TrainConfig { warmup_iters: 0, ..tiny_config() };
        assert_eq!(warmup(&ds, &cfg).unwrap(), Model::init(&ds, &cfg).set);
    }

    #[test]
    fn same_seed_gives_identical_trace() {
        let (_d, ds) = tiny_dataset();
        let (a, ta) = train(&ds, &tiny_config(), |_| {}).unwrap();
        let (b, tb) = train(&ds, &tiny_config(), |_| {}).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert_eq!(ta.len(), 40);
        assert!(ta[..20].iter().all(|r| r.stage == Stage::Warmup && r.tv == 0.0));
        assert!(ta[20..].iter().all(|r| r.stage == Stage::Joint && r.tv > 0.0));
        assert!(ta[35..].iter().all(|r| r.dssim > 0.0));
        assert!(ta[20..35].iter().all(|r| r.dssim == 0.0));
        assert!(ta.iter().all(|r| r.gaussians <= 100));
    }

    #[test]
    fn joint_start_matches_warmup_loss_at_time_zero() {
        let (_d, ds) = tiny_dataset();
        let cfg = TrainConfig { tv: false, ..tiny_config() };
        let mut t = Trainer::new(&ds, cfg.clone()).unwrap();
        t.run_warmup().unwrap();
        let canonical = t.model.set.clone();
        let deformed = t.model.at_time(0.0);
        assert_eq!(canonical, deformed);
        let f = ds.frames.iter().find(|f| f.time_index == 0).unwrap();
        let cam = ds.camera(f.view);
        let a = render(&canonical, cam, Payload::Color, &t.settings, false);
        let b = render(&deformed, cam, Payload::Color, &t.settings, false);
        assert_eq!(a.output.image, b.output.image);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let (_d, ds) = tiny_dataset();
        let mut t = Trainer::new(&ds, tiny_config()).unwrap();
        t.model.set.sh[0] = f64::NAN;
        t.model.set.means[0] = [0.0, 0.0, 0.0];
        t.model.set.log_scales[0] = [0.5; 3];
        t.model.set.opacity_logits[0] = 5.0;
        let err = (0..8).find_map(|_| t.step().err()).expect("NaN color must surface");
        assert!(matches!(err, Error::NonFiniteLoss { stage: "warmup", .. }), "{err}");
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let (_d, mut ds) = tiny_dataset();
        for v in &mut ds.manifest.views {
            v.split = Split::Test;
        }
        assert!(matches!(Trainer::new(&ds, tiny_config()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn evaluation_covers_every_timestep() {
        let (_d, ds) = tiny_dataset();
        let model = Model::init(&ds, &tiny_config());
        let r = evaluate(&ds, &model, Split::Test, &RenderSettings::default()).unwrap();
        assert_eq!(r.psnr_per_timestep.len(), 2);
        assert_eq!(r.frames, 4);
        assert!(r.mean_psnr.is_finite());
    }
}
