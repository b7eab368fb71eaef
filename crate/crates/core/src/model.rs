//! The full trainable pipeline: unprojector, denoiser and render MLP.

use holovox_tensor::{Float, ParamStore};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser3d, DenoiserConfig};
use crate::error::{Error, Result};
use crate::renderer::{RenderConfig, RenderMlp};
use crate::schedule::NoiseSchedule;
use crate::unprojector::{Unprojector, UnprojectorConfig};
use crate::Rng;

pub const PARAM_GROUPS: [&str; 4] = ["encoder.", "accumulator.", "denoiser.", "render."];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_first: f64,
    pub beta_last: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: crate::schedule::DEFAULT_STEPS,
            beta_first: crate::schedule::DEFAULT_BETA_FIRST,
            beta_last: crate::schedule::DEFAULT_BETA_LAST,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_first, self.beta_last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_channels: usize,
    pub grid_resolution: usize,
    pub feature_dim: usize,
    pub accumulator_hidden: usize,
    pub unet_width: usize,
    pub unet_levels: usize,
    pub unet_time_dim: usize,
    pub unet_attention: bool,
    pub render_hidden: usize,
    pub render: RenderConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_channels: 64,
            grid_resolution: 16,
            feature_dim: 32,
            accumulator_hidden: 64,
            unet_width: 64,
            unet_levels: 2,
            unet_time_dim: 32,
            unet_attention: true,
            render_hidden: 256,
            render: RenderConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_channels < 4 {
            return Err(Error::Config(format!(
                "grid.channels must be at least 4, got {}",
                self.grid_channels
            )));
        }
        let div = 1usize << self.unet_levels;
        if self.grid_resolution == 0 || self.grid_resolution % div != 0 {
            return Err(Error::Config(format!(
                "grid.resolution {} must be a positive multiple of 2^unet.levels = {div}",
                self.grid_resolution
            )));
        }
        if self.feature_dim == 0 || self.accumulator_hidden == 0 || self.render_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.render.validate()?;
        self.denoiser().validate()?;
        self.schedule.build().map(|_| ())
    }

    pub fn unprojector(&self) -> UnprojectorConfig {
        UnprojectorConfig {
            feature_dim: self.feature_dim,
            accumulator_hidden: self.accumulator_hidden,
            grid_channels: self.grid_channels,
            grid_resolution: self.grid_resolution,
            lo: self.render.cube_lo,
            hi: self.render.cube_hi,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.grid_channels,
            base_width: self.unet_width,
            levels: self.unet_levels,
            time_dim: self.unet_time_dim,
            attention: self.unet_attention,
            steps: self.schedule.steps,
        }
    }

    pub fn grid_shape(&self) -> [usize; 4] {
        let s = self.grid_resolution;
        [self.grid_channels, s, s, s]
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub unprojector: Unprojector,
    pub denoiser: Denoiser3d,
    pub render: RenderMlp,
    pub schedule: NoiseSchedule,
}

impl Model {
    /// Builds the layer layout and registers freshly initialized parameters.
    pub fn new<F: Float>(config: ModelConfig, store: &mut ParamStore<F>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let unprojector = Unprojector::new(store, rng, config.unprojector());
        let schedule = config.schedule.build()?;
        let denoiser = Denoiser3d::new(store, rng, "denoiser", config.denoiser())?.with_schedule(&schedule)?;
        let render = RenderMlp::new(store, rng, "render", config.grid_channels, config.render_hidden);
        Ok(Self {
            config,
            unprojector,
            denoiser,
            render,
            schedule,
        })
    }

    /// Model plus parameters initialized from `seed`.
    pub fn init<F: Float>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(seed);
        let model = Self::new(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Layout only; parameter values come from a checkpoint.
    pub fn layout<F: Float>(config: ModelConfig) -> Result<(Self, ParamStore<F>)> {
        Self::init(config, 0)
    }
}
