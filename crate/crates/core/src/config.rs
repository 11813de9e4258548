//! Network, optimizer and run configuration.
//!
//! A run is described by one TOML file. Required keys:
//!
//! ```toml
//! resolution = 32            # input side length, divisible by 32
//! width_multiplier = 0.0625  # 1.0 = full-width streams (VGG base 64)
//! stages = 3                 # recursive stages N
//!
//! [optimizer]
//! lr = 0.05
//! momentum_main = 0.9        # backbone streams
//! momentum_fusion = 0.9      # fusion modules and the fusion head
//! weight_decay = 0.0005
//! lr_decay_factor = 0.1
//! lr_decay_step = 10000
//! batch_size = 4
//!
//! [loss_weights]
//! vgg = 1.0
//! resnet = 1.0
//! sdf = 1.0
//! ```
//!
//! Optional keys: `max_resolution`, `sdf_width`, `resnet_blocks`, and a
//! `[training]` table (`iterations`, `checkpoint_every`, `seed`,
//! `freeze_earlier_stages`).

use crate::error::{Error, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Channel counts of the full-width streams.
pub const VGG_PATTERN: [usize; 5] = [1, 2, 4, 8, 8];
pub const VGG_LAYERS_PER_BLOCK: [usize; 5] = [2, 2, 3, 3, 3];
pub const RESNET_WIDTHS: [usize; 5] = [64, 256, 512, 1024, 2048];
pub const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const DECODER_WIDTHS: [usize; 4] = [256, 128, 64, 32];
pub const AGG_CHANNELS: usize = 64;
pub const SDF_WIDTH: usize = 64;
/// Encoder convolutions per fusion-head block (13 in total).
pub const SDF_ENCODER_LAYERS: [usize; 4] = [3, 3, 3, 4];

fn default_max_resolution() -> usize {
    4096
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub resolution: usize,
    pub width_multiplier: f64,
    pub stages: usize,
    #[serde(default = "default_max_resolution")]
    pub max_resolution: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdf_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resnet_blocks: Option<[usize; 4]>,
}

fn scaled(full: usize, multiplier: f64) -> usize {
    ((full as f64 * multiplier).round() as usize).max(1)
}

impl NetworkConfig {
    pub fn full_scale() -> Self {
        Self {
            resolution: 256,
            width_multiplier: 1.0,
            stages: 3,
            max_resolution: default_max_resolution(),
            sdf_width: None,
            resnet_blocks: None,
        }
    }

    /// Tiny configuration: `base` VGG channels at the first block.
    pub fn micro(resolution: usize, base: usize, stages: usize) -> Self {
        Self {
            resolution,
            width_multiplier: base as f64 / 64.0,
            stages,
            max_resolution: default_max_resolution(),
            sdf_width: None,
            resnet_blocks: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "resolution {} is not a positive multiple of 32",
                self.resolution
            )));
        }
        if self.resolution > self.max_resolution {
            return Err(Error::Config(format!(
                "resolution {} exceeds max_resolution {}",
                self.resolution, self.max_resolution
            )));
        }
        if !(self.width_multiplier >= 1.0 / 64.0 - 1e-12 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "width_multiplier {} is below 1/64",
                self.width_multiplier
            )));
        }
        if self.stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if matches!(self.sdf_width, Some(0)) {
            return Err(Error::Config("sdf_width must be positive".into()));
        }
        if let Some(blocks) = self.resnet_blocks {
            if blocks.contains(&0) {
                return Err(Error::Config("resnet_blocks entries must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn vgg_base(&self) -> usize {
        scaled(64, self.width_multiplier)
    }

    /// Output channels of VGG blocks 1..5: `base * (1, 2, 4, 8, 8)`.
    pub fn vgg_widths(&self) -> [usize; 5] {
        VGG_PATTERN.map(|k| k * self.vgg_base())
    }

    pub fn resnet_widths(&self) -> [usize; 5] {
        RESNET_WIDTHS.map(|c| scaled(c, self.width_multiplier))
    }

    /// Bottleneck blocks at width multipliers of 1/8 and above, plain
    /// two-conv residual blocks below.
    pub fn uses_bottleneck(&self) -> bool {
        self.width_multiplier >= 0.125
    }

    pub fn resnet_blocks(&self) -> [usize; 4] {
        self.resnet_blocks.unwrap_or(if self.uses_bottleneck() {
            RESNET50_BLOCKS
        } else {
            [2, 2, 2, 2]
        })
    }

    pub fn decoder_widths(&self) -> [usize; 5] {
        let d = DECODER_WIDTHS.map(|c| scaled(c, self.width_multiplier));
        [d[0], d[1], d[2], d[3], 1]
    }

    pub fn agg_channels(&self) -> usize {
        scaled(AGG_CHANNELS, self.width_multiplier)
    }

    pub fn sdf_width(&self) -> usize {
        self.sdf_width
            .unwrap_or_else(|| scaled(SDF_WIDTH, self.width_multiplier).max(8))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum_main: f64,
    pub momentum_fusion: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_step: usize,
    pub batch_size: usize,
}

impl OptimizerConfig {
    /// Desk-scale defaults for randomly initialized streams.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            momentum_main: 0.9,
            momentum_fusion: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_step: 10_000,
            batch_size: 4,
        }
    }

    /// Settings for pretrained backbones at full scale.
    pub fn paper() -> Self {
        Self {
            lr: 1e-8,
            momentum_main: 0.99,
            momentum_fusion: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_step: 10_000,
            batch_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be finite and >= 0, got {}", self.lr)));
        }
        for (key, m) in [("momentum_main", self.momentum_main), ("momentum_fusion", self.momentum_fusion)] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("optimizer.{key} must lie in [0, 1), got {m}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be at least 1".into()));
        }
        if self.lr_decay_step == 0 {
            return Err(Error::Config("optimizer.lr_decay_step must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer.weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate at 0-based `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((iteration / self.lr_decay_step) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub vgg: f64,
    pub resnet: f64,
    pub sdf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vgg: 1.0,
            resnet: 1.0,
            sdf: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Cut the gradient between recursive stages so each stage is fit on
    /// its own inputs.
    pub freeze_earlier_stages: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            checkpoint_every: 0,
            seed: 0,
            freeze_earlier_stages: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(flatten)]
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub training: TrainingConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 32x32 input, base width 4: fast enough to train on a laptop CPU.
    Micro,
    /// 64x64 input, base width 8.
    Desk,
    /// Full-width streams at 256x256.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Preset::Micro),
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Micro => "micro",
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Micro => Self {
                network: NetworkConfig {
                    sdf_width: Some(16),
                    ..NetworkConfig::micro(32, 4, 3)
                },
                optimizer: OptimizerConfig {
                    lr: 0.05,
                    batch_size: 8,
                    lr_decay_step: 400,
                    ..OptimizerConfig::desk()
                },
                loss_weights: LossWeights::default(),
                training: TrainingConfig {
                    iterations: 500,
                    ..TrainingConfig::default()
                },
            },
            Preset::Desk => Self {
                network: NetworkConfig::micro(64, 8, 3),
                optimizer: OptimizerConfig::desk(),
                loss_weights: LossWeights::default(),
                training: TrainingConfig::default(),
            },
            Preset::Paper => Self {
                network: NetworkConfig::full_scale(),
                optimizer: OptimizerConfig::paper(),
                loss_weights: LossWeights::default(),
                training: TrainingConfig {
                    iterations: 20_000,
                    checkpoint_every: 1_000,
                    ..TrainingConfig::default()
                },
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()
    }
}

/// Independent consumers of the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedConsumer {
    Init,
    Shuffle,
    Synthetic,
}

/// Splits the root seed: each consumer draws from its own ChaCha stream.
pub fn consumer_seed(root: u64, consumer: SeedConsumer) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(consumer as u64 + 1);
    rng.next_u64()
}
