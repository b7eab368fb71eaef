//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. `dataset` and `out`
//! are required; every other key falls back to a default and a notice is
//! printed for it. Relative paths resolve against the config file's folder.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use holovox::model::ScheduleConfig;
use holovox::renderer::RenderConfig;
use holovox::trainer::{PlateauConfig, TrainConfig};
use holovox::ModelConfig;

use crate::Usage;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Every n-th frame of each video is held out from training.
    pub holdout_every: usize,
    pub checkpoint_every: u64,
    pub render_every: u64,
    pub print_every: u64,
    /// Canonical `key = value` lines for every setting, in schema order.
    pub resolved: Vec<(String, String)>,
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
    resolved: Vec<(String, String)>,
    notices: Vec<String>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Usage(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let key = k.trim().to_string();
            if let Some((first, _)) = map.insert(key.clone(), (i + 1, v.trim().to_string())) {
                return Err(Usage(format!("line {}: key `{key}` already set on line {first}", i + 1)).into());
            }
        }
        Ok(Self {
            map,
            resolved: Vec::new(),
            notices: Vec::new(),
        })
    }

    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match self.raw(key) {
            Some((line, v)) => v
                .parse()
                .map_err(|e| Usage(format!("line {line}: bad value `{v}` for `{key}`: {e}")))?,
            None => {
                self.notices.push(format!("{key} not set, using default {default}"));
                default
            }
        };
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    fn path(&mut self, key: &str, base: &Path) -> Result<PathBuf> {
        let (_, v) = self
            .raw(key)
            .ok_or_else(|| Usage(format!("required key `{key}` is missing")))?;
        self.resolved.push((key.to_string(), v.clone()));
        let p = PathBuf::from(v);
        Ok(if p.is_absolute() { p } else { base.join(p) })
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<(Self, Vec<String>)> {
        let mut e = Entries::parse(text)?;
        let dm = ModelConfig::default();
        let dt = TrainConfig::default();
        let dp = PlateauConfig::default();
        let dr = RenderConfig::default();
        let ds = ScheduleConfig::default();

        let dataset = e.path("dataset", base)?;
        let out = e.path("out", base)?;
        let seed = e.get("seed", 0u64)?;
        let deterministic = e.get("deterministic", true)?;
        let model = ModelConfig {
            grid_channels: e.get("grid_channels", dm.grid_channels)?,
            grid_resolution: e.get("grid_resolution", dm.grid_resolution)?,
            feature_dim: e.get("feature_dim", dm.feature_dim)?,
            accumulator_hidden: e.get("accumulator_hidden", dm.accumulator_hidden)?,
            unet_width: e.get("unet_width", dm.unet_width)?,
            unet_levels: e.get("unet_levels", dm.unet_levels)?,
            unet_time_dim: e.get("unet_time_dim", dm.unet_time_dim)?,
            unet_attention: e.get("unet_attention", dm.unet_attention)?,
            render_hidden: e.get("render_hidden", dm.render_hidden)?,
            render: RenderConfig {
                n_samples: e.get("n_samples", dr.n_samples)?,
                cube_lo: e.get("cube_lo", dr.cube_lo)?,
                cube_hi: e.get("cube_hi", dr.cube_hi)?,
            },
            schedule: ScheduleConfig {
                steps: e.get("diffusion_steps", ds.steps)?,
                beta_first: e.get("beta_first", ds.beta_first)?,
                beta_last: e.get("beta_last", ds.beta_last)?,
            },
        };
        let train = TrainConfig {
            n_source: e.get("n_source", dt.n_source)?,
            n_target: e.get("n_target", dt.n_target)?,
            learning_rate: e.get("learning_rate", dt.learning_rate)?,
            bootstrap_prob: e.get("bootstrap_prob", dt.bootstrap_prob)?,
            rays_per_target: e.get("rays_per_target", dt.rays_per_target)?,
            max_steps: e.get("steps", dt.max_steps)?,
            plateau: PlateauConfig {
                factor: e.get("plateau_factor", dp.factor)?,
                patience: e.get("plateau_patience", dp.patience)?,
                threshold: e.get("plateau_threshold", dp.threshold)?,
                window: e.get("plateau_window", dp.window)?,
                max_decays: e.get("plateau_max_decays", dp.max_decays)?,
            },
        };
        let holdout_every = e.get("holdout_every", 5usize)?;
        let checkpoint_every = e.get("checkpoint_every", 500u64)?;
        let render_every = e.get("render_every", 500u64)?;
        let print_every = e.get("print_every", 50u64)?;
        if let Some((key, (line, _))) = e.map.iter().next() {
            return Err(Usage(format!("line {line}: unknown key `{key}`")).into());
        }
        model.validate().map_err(|err| Usage(err.to_string()))?;
        train.validate().map_err(|err| Usage(err.to_string()))?;
        if holdout_every == 1 {
            return Err(Usage("holdout_every = 1 would hold out every frame".into()).into());
        }
        let mut notices = e.notices;
        if !deterministic {
            notices.push("deterministic = false has no effect; kernels are always deterministic".into());
        }
        Ok((
            Self {
                dataset,
                out,
                seed,
                deterministic,
                model,
                train,
                holdout_every,
                checkpoint_every,
                render_every,
                print_every,
                resolved: e.resolved,
            },
            notices,
        ))
    }

    pub fn to_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
