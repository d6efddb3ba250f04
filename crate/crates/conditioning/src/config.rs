//! Network, schedule and training configuration with named presets.

use serde::{Deserialize, Serialize};
use uniavatar_render::GuidanceConfig;

use crate::error::{Error, Result};

/// Image-to-latent downsampling factor.
pub const LATENT_FACTOR: usize = 8;
pub const LATENT_CHANNELS: usize = 3;
/// Spatial-attention sites, which equals the number of motion taps.
pub const SITES: usize = 6;
/// Sites after which the encoder path halves the resolution.
pub const DOWNSAMPLE_AFTER: [usize; 2] = [1, 3];
/// Input side must be a multiple of this (stem /8 then two more halvings).
pub const SIZE_MULTIPLE: usize = 32;
/// Upper bound on any single width or resolution.
pub const MAX_DIM: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Square input resolution of images and guidance.
    pub resolution: usize,
    /// Per-site channels, shared by motion taps and denoiser sites.
    pub channels: [usize; SITES],
    /// Motion-encoder stem, three stride-2 convolutions.
    pub stem_channels: [usize; 3],
    pub illum_channels: [usize; 8],
    pub illum_strides: [usize; 8],
    pub heads: usize,
    pub time_dim: usize,
    pub audio_dim: usize,
    /// Audio rows attended per frame.
    pub audio_window: usize,
    pub expr_dims: usize,
    pub adaln_hidden: usize,
    /// Frozen feature extractor of the perceptual distance.
    pub perceptual_channels: [usize; 3],
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            channels: [16, 16, 32, 32, 64, 64],
            stem_channels: [8, 16, 16],
            illum_channels: [8, 8, 16, 16, 16, 16, 32, 32],
            illum_strides: [1, 2, 1, 2, 1, 2, 1, 1],
            heads: 2,
            time_dim: 16,
            audio_dim: 32,
            audio_window: 3,
            expr_dims: 4,
            adaln_hidden: 16,
            perceptual_channels: [8, 16, 16],
        }
    }

    pub fn paper() -> Self {
        Self {
            resolution: 512,
            channels: [320, 320, 640, 640, 1280, 1280],
            stem_channels: [16, 32, 320],
            illum_channels: [16, 16, 32, 32, 96, 96, 256, 256],
            illum_strides: [1, 2, 1, 2, 1, 2, 1, 1],
            heads: 8,
            time_dim: 320,
            audio_dim: 768,
            audio_window: 3,
            expr_dims: 50,
            adaln_hidden: 256,
            perceptual_channels: [64, 128, 256],
        }
    }

    /// Narrow variant of the desk network, small enough to difference every
    /// parameter.
    pub fn gradcheck() -> Self {
        Self {
            resolution: 32,
            channels: [4, 4, 8, 8, 8, 8],
            stem_channels: [2, 2, 4],
            illum_channels: [2, 2, 2, 2, 4, 4, 4, 4],
            illum_strides: [1, 2, 1, 2, 1, 2, 1, 1],
            heads: 2,
            time_dim: 4,
            audio_dim: 4,
            audio_window: 3,
            expr_dims: 2,
            adaln_hidden: 4,
            perceptual_channels: [2, 2, 2],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "gradcheck" => Ok(Self::gradcheck()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected paper, desk or gradcheck)"
            ))),
        }
    }

    /// Side of the latent grid.
    pub fn latent_size(&self) -> usize {
        self.resolution / LATENT_FACTOR
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not a positive multiple of {SIZE_MULTIPLE}",
                self.resolution
            )));
        }
        let all = self
            .channels
            .iter()
            .chain(&self.stem_channels)
            .chain(&self.illum_channels)
            .chain(&self.perceptual_channels);
        if all.clone().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let widths = [self.resolution, self.heads, self.time_dim, self.audio_dim, self.audio_window, self.expr_dims, self.adaln_hidden];
        if all.chain(&widths).any(|&c| c > MAX_DIM) {
            return Err(Error::Config(format!("widths and resolution must not exceed {MAX_DIM}")));
        }
        if self.stem_channels[2] != self.channels[0] {
            return Err(Error::Config(format!(
                "stem must end at {} channels, got {}",
                self.channels[0], self.stem_channels[2]
            )));
        }
        let down: usize = self.illum_strides.iter().product();
        if down != LATENT_FACTOR || self.illum_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config(format!(
                "illumination strides {:?} must be 1 or 2 with product {LATENT_FACTOR}",
                self.illum_strides
            )));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        for &c in self.channels.iter().chain([&self.illum_channels[7]]) {
            if c % self.heads != 0 {
                return Err(Error::Config(format!("{c} channels do not split into {} heads", self.heads)));
            }
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim {} must be even and ≥ 2", self.time_dim)));
        }
        if self.audio_window % 2 == 0 {
            return Err(Error::Config(format!("audio_window {} must be odd", self.audio_window)));
        }
        if self.audio_dim == 0 || self.expr_dims == 0 || self.adaln_hidden == 0 {
            return Err(Error::Config("audio, expression and AdaLN widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn desk() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }

    pub fn paper() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the spatial loss.
    pub lambda: f64,
    /// Fraction of stage-1 steps before illumination guidance is mixed in
    /// and the motion encoder is frozen.
    pub illumination_mix_fraction: f64,
    /// Ground-truth frames prepended to each stage-2 clip.
    pub context_frames: usize,
    /// Predicted frames per stage-2 clip.
    pub clip_frames: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    pub workers: usize,
    pub prefetch: usize,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub guidance: GuidanceConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            stage: 1,
            steps: 500,
            batch: 2,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda: 0.1,
            illumination_mix_fraction: 0.2,
            context_frames: 2,
            clip_frames: 2,
            max_grad_norm: 1.0,
            workers: 2,
            prefetch: 4,
            schedule: ScheduleConfig::desk(),
            net: NetConfig::desk(),
            guidance: GuidanceConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            stage: 1,
            steps: 30_000,
            batch: 8,
            lr: 1e-5,
            optimizer: OptimizerKind::Adam,
            lambda: 0.1,
            illumination_mix_fraction: 1.0 / 3.0,
            context_frames: 2,
            clip_frames: 14,
            max_grad_norm: 1.0,
            workers: 4,
            prefetch: 8,
            schedule: ScheduleConfig::paper(),
            net: NetConfig::paper(),
            guidance: GuidanceConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }

    /// First step that sees illumination guidance.
    pub fn illumination_mix_step(&self) -> usize {
        (self.illumination_mix_fraction * self.steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.guidance.validate()?;
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.illumination_mix_fraction) {
            return Err(Error::Config(format!(
                "illumination_mix_fraction {} outside [0, 1]",
                self.illumination_mix_fraction
            )));
        }
        if self.clip_frames == 0 {
            return Err(Error::Config("clip_frames must be positive".into()));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::Config("max_grad_norm must be non-negative".into()));
        }
        crate::schedule::DiffusionSchedule::linear(&self.schedule)?;
        Ok(())
    }
}
