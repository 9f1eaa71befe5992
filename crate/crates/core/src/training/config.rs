use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraDistribution;
use crate::error::{config, Result};
use crate::io::format_err;
use crate::synthesizer::ToyConfig;
use crate::volume_render::{RenderSettings, DEFAULT_COARSE_SAMPLES, DEFAULT_FINE_SAMPLES, DEFAULT_UPSAMPLE_FACTOR};

use super::loss::LossWeights;
use super::optim::OptimizerConfig;
use super::scene::SceneConfig;
use super::schedule::SubstitutionRates;

/// Neural rendering resolution of the toy training runs.
pub const TOY_RENDER_RESOLUTION: usize = 32;

/// Everything a training run depends on besides its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Draws whose gradients are averaged into each optimizer step.
    pub batch_size: usize,
    pub scenes: usize,
    /// Side of the volume-rendered image before upsampling.
    pub render_resolution: usize,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub upsample_factor: usize,
    /// uv locations per plane for the triplane term.
    pub triplane_samples: usize,
    /// Evaluate the held-out views every this many steps; 0 evaluates only
    /// before the first and after the last step.
    pub eval_every: usize,
    /// Side of the downsampled grid the motion stub projects.
    pub motion_grid: usize,
    pub motion_seed: u64,
    pub model_seed: u64,
    pub optimizer: OptimizerConfig,
    pub rates: SubstitutionRates,
    pub weights: LossWeights,
    pub scene: SceneConfig,
    pub model: ToyConfig,
    pub cameras: CameraDistribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 2,
            scenes: 2,
            render_resolution: TOY_RENDER_RESOLUTION,
            coarse_samples: DEFAULT_COARSE_SAMPLES,
            fine_samples: DEFAULT_FINE_SAMPLES,
            upsample_factor: DEFAULT_UPSAMPLE_FACTOR,
            triplane_samples: 1024,
            eval_every: 0,
            motion_grid: 8,
            motion_seed: 7,
            model_seed: 1,
            optimizer: OptimizerConfig::default(),
            rates: SubstitutionRates::default(),
            weights: LossWeights::default(),
            scene: SceneConfig::default(),
            model: ToyConfig::default(),
            cameras: CameraDistribution::default(),
        }
    }
}

impl TrainConfig {
    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            coarse_samples: self.coarse_samples,
            fine_samples: self.fine_samples,
            upsample_factor: self.upsample_factor,
            ..RenderSettings::default()
        }
    }

    /// Side of the final (upsampled) training images.
    pub fn final_resolution(&self) -> usize {
        self.render_resolution * self.upsample_factor
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.rates.validate()?;
        self.weights.validate()?;
        self.model.validate()?;
        self.cameras.validate()?;
        if self.batch_size == 0 {
            return Err(config("batch_size must be at least 1"));
        }
        if self.scenes == 0 {
            return Err(config("training needs at least one scene"));
        }
        if self.render_resolution == 0 || self.upsample_factor == 0 {
            return Err(config("render resolution and upsample factor must be positive"));
        }
        if !self.final_resolution().is_multiple_of(self.model.image_side) {
            return Err(config(format!(
                "final resolution {} is not a multiple of the model input side {}",
                self.final_resolution(),
                self.model.image_side
            )));
        }
        if !self.final_resolution().is_multiple_of(self.motion_grid.max(1)) || self.motion_grid == 0 {
            return Err(config("motion grid must divide the final resolution"));
        }
        if self.model.triplane_channels != super::scene::SCENE_CHANNELS {
            return Err(config(format!(
                "the scene decoder reads {} channels, model emits {}",
                super::scene::SCENE_CHANNELS,
                self.model.triplane_channels
            )));
        }
        if self.triplane_samples == 0 {
            return Err(config("triplane_samples must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("training config serializes")
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| format_err(path, e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path)
    }
}
