//! Run configuration file (TOML) shared by the commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniavatar_conditioning::{OptimizerKind, TrainConfig};
use uniavatar_render::GuidanceConfig;

use crate::error::{io_at, CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64² toy network that trains on one CPU core.
    #[default]
    Desk,
    /// Full-size widths and schedule; shape checks only.
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

/// Every field is optional. Unset network and training fields take the
/// preset's value; `guidance` defaults to blur radius 15 and probabilities
/// 0.4 / 0.2 / 0.05.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `desk` (default) or `paper`.
    pub preset: Preset,
    /// Root seed (default 0). Commands derive named sub-streams from it.
    pub seed: Option<u64>,
    /// Square image size, a multiple of 32.
    pub resolution: Option<usize>,
    /// Widths of the six feature sites. The last stem width follows the
    /// first site.
    pub channels: Option<[usize; 6]>,
    /// Diffusion steps T.
    pub schedule_steps: Option<usize>,
    /// Weight of the spatial loss (default 0.1).
    pub lambda: Option<f64>,
    pub stage1_steps: Option<usize>,
    pub stage2_steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    /// Fraction of stage-1 steps before illumination guidance joins.
    pub illumination_mix_fraction: Option<f64>,
    pub guidance: GuidanceConfig,
    /// Dataset root for `train`.
    pub data: Option<PathBuf>,
    /// Stage-1 checkpoint that stage 2 starts from.
    pub init: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_at(path))?)
    }

    /// The file at `path`, or the defaults when there is none.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Resolved training configuration for `stage`.
    pub fn train_config(&self, stage: u8) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::preset(self.preset.name())?;
        cfg.stage = stage;
        if let Some(r) = self.resolution {
            cfg.net.resolution = r;
        }
        if let Some(ch) = self.channels {
            cfg.net.channels = ch;
            cfg.net.stem_channels[2] = ch[0];
        }
        if let Some(t) = self.schedule_steps {
            cfg.schedule.steps = t;
        }
        let steps = if stage == 1 { self.stage1_steps } else { self.stage2_steps };
        if let Some(s) = steps {
            cfg.steps = s;
        }
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        take!(lambda, batch, lr, optimizer, illumination_mix_fraction);
        cfg.guidance = self.guidance.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}
