#![allow(dead_code)]

use std::path::Path;

use holovox::dataio::{generate_dataset, load_dataset};
use holovox::model::ScheduleConfig;
use holovox::renderer::RenderConfig;
use holovox::trainer::{PosedVideo, TrainConfig};
use holovox::ModelConfig;

pub fn micro_model() -> ModelConfig {
    ModelConfig {
        grid_channels: 4,
        grid_resolution: 4,
        feature_dim: 4,
        accumulator_hidden: 8,
        unet_width: 4,
        unet_levels: 2,
        unet_time_dim: 8,
        unet_attention: true,
        render_hidden: 16,
        render: RenderConfig { n_samples: 8, ..Default::default() },
        schedule: ScheduleConfig::default(),
    }
}

pub fn micro_train() -> TrainConfig {
    TrainConfig {
        n_source: 4,
        n_target: 2,
        ..Default::default()
    }
}

pub fn dataset(dir: &Path, scenes: usize, frames: usize, size: u32, seed: u64) -> Vec<PosedVideo> {
    generate_dataset(dir, scenes, frames, size, seed).unwrap();
    load_dataset(dir).unwrap()
}
