//! Training configuration, stored as a flat TOML table.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deform::{Combine, DeformConfig, EncoderKind};
use crate::error::{Error, Result};

/// Photometric objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    /// L2 throughout, plus DSSIM over the last `dssim_iters` joint iterations.
    #[default]
    #[serde(rename = "l2+dssim")]
    L2Dssim,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "l2+dssim" => Ok(LossKind::L2Dssim),
            _ => Err(Error::Config(format!("unknown loss {s:?}, expected l1, l2 or l2+dssim"))),
        }
    }
}

/// Every field has a key of the same name in the config file; missing keys
/// take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub warmup_iters: usize,
    pub joint_iters: usize,
    pub loss: LossKind,
    pub tv: bool,
    pub lambda_tv: f64,
    pub lambda_dssim: f64,
    /// DSSIM is active for this many final joint iterations.
    pub dssim_iters: usize,

    pub lr_encoder: f64,
    pub lr_decoder: f64,
    /// Field learning rates decay exponentially to this fraction by the end
    /// of joint training.
    pub lr_field_final_factor: f64,
    /// Scaled by the camera-rig extent.
    pub lr_means: f64,
    /// Mean learning rate decays exponentially to this fraction over the
    /// whole schedule.
    pub lr_means_final_factor: f64,
    pub lr_sh: f64,
    /// Higher SH bands learn at `lr_sh / sh_rest_lr_divisor`.
    pub sh_rest_lr_divisor: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,

    pub sh_degree: usize,
    pub init_gaussians: usize,
    pub init_opacity: f64,
    pub max_gaussians: usize,
    /// Densification runs on global iterations in `[densify_from, densify_until)`.
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    /// Mean screen-space gradient norm that marks a Gaussian for densification.
    pub densify_grad_threshold: f64,
    /// Gaussians larger than this fraction of the rig extent are split,
    /// smaller ones are cloned.
    pub densify_size_fraction: f64,
    pub prune_opacity: f64,

    pub encoder: EncoderKind,
    pub grid_res: usize,
    pub time_res: usize,
    pub rank_s: usize,
    pub rank_t: usize,
    pub combine: Combine,
    pub decoder_hidden: Vec<usize>,
    pub init_range: f64,
    pub implicit_frequencies: usize,
    pub implicit_hidden: Vec<usize>,
    pub opacity_deform: bool,
    /// The encoder normalization box is the scene box grown by this fraction.
    pub aabb_dilation: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = DeformConfig::default();
        TrainConfig {
            seed: 0,
            warmup_iters: 3000,
            joint_iters: 20000,
            loss: LossKind::L2Dssim,
            tv: true,
            lambda_tv: 1e-4,
            lambda_dssim: 0.2,
            dssim_iters: 5000,
            lr_encoder: 1e-3,
            lr_decoder: 1e-4,
            lr_field_final_factor: 0.1,
            lr_means: 1.6e-4,
            lr_means_final_factor: 0.01,
            lr_sh: 2.5e-3,
            sh_rest_lr_divisor: 20.0,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            sh_degree: 2,
            init_gaussians: 2000,
            init_opacity: 0.1,
            max_gaussians: 5000,
            densify_from: 500,
            densify_until: 15000,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            densify_size_fraction: 0.01,
            prune_opacity: 0.005,
            encoder: d.encoder,
            grid_res: d.grid_res,
            time_res: d.time_res,
            rank_s: d.rank_s,
            rank_t: d.rank_t,
            combine: d.combine,
            decoder_hidden: d.decoder_hidden,
            init_range: d.init_range,
            implicit_frequencies: d.implicit_frequencies,
            implicit_hidden: d.implicit_hidden,
            opacity_deform: d.opacity_deform,
            aabb_dilation: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn deform_config(&self) -> DeformConfig {
        DeformConfig {
            encoder: self.encoder,
            grid_res: self.grid_res,
            time_res: self.time_res,
            rank_s: self.rank_s,
            rank_t: self.rank_t,
            combine: self.combine,
            decoder_hidden: self.decoder_hidden.clone(),
            init_range: self.init_range,
            implicit_frequencies: self.implicit_frequencies,
            implicit_hidden: self.implicit_hidden.clone(),
            opacity_deform: self.opacity_deform,
        }
    }

    pub fn total_iters(&self) -> usize {
        self.warmup_iters + self.joint_iters
    }

    /// Whether DSSIM enters the loss at joint iteration `k` (0-based).
    pub fn dssim_active(&self, k: usize) -> bool {
        self.loss == LossKind::L2Dssim && self.lambda_dssim > 0.0 && k + self.dssim_iters >= self.joint_iters
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("lr_field_final_factor", self.lr_field_final_factor),
            ("lr_means", self.lr_means),
            ("lr_means_final_factor", self.lr_means_final_factor),
            ("lr_sh", self.lr_sh),
            ("sh_rest_lr_divisor", self.sh_rest_lr_divisor),
            ("lr_opacity", self.lr_opacity),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("densify_grad_threshold", self.densify_grad_threshold),
            ("densify_size_fraction", self.densify_size_fraction),
            ("init_range", self.init_range),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda_tv", self.lambda_tv), ("lambda_dssim", self.lambda_dssim), ("aabb_dilation", self.aabb_dilation)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::Config("init_opacity must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return Err(Error::Config("prune_opacity must lie in [0, 1)".into()));
        }
        if self.dssim_iters > self.joint_iters {
            return Err(Error::Config(format!(
                "dssim_iters ({}) exceeds joint_iters ({})",
                self.dssim_iters, self.joint_iters
            )));
        }
        if self.sh_degree > crate::scene::sh::MAX_SH_DEGREE {
            return Err(Error::Config(format!("sh_degree {} above the supported maximum", self.sh_degree)));
        }
        if self.init_gaussians == 0 || self.max_gaussians < self.init_gaussians {
            return Err(Error::Config("need 0 < init_gaussians <= max_gaussians".into()));
        }
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be positive".into()));
        }
        if self.grid_res < 2 || self.time_res < 2 || self.rank_s == 0 || self.rank_t == 0 {
            return Err(Error::Config("need grid_res, time_res >= 2 and ranks >= 1".into()));
        }
        Ok(())
    }
}
