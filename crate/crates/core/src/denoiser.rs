//! 3D UNet predicting the clean grid from a noised one and its timestep.

use holovox_tensor::{Bound, Float, ParamStore, Tape, Tensor, UpsampleMode, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky, scale_param, Conv3d, GroupNorm, Linear};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_FIRST, DEFAULT_BETA_LAST};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub time_dim: usize,
    pub attention: bool,
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            base_width: 64,
            levels: 2,
            time_dim: 32,
            attention: true,
            steps: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_width == 0 || self.channels == 0 {
            return Err(Error::Config("denoiser levels, width and channels must be positive".into()));
        }
        if self.time_dim < 4 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "denoiser.time_dim must be even and at least 4, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }
}

/// `[sin(ω_i τ), cos(ω_i τ)]` with `τ = t/T` and `ω_i` log-spaced in `[1, 1000]`.
pub fn timestep_embedding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let tau = t as f64 / steps as f64;
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let omega = |i: usize| {
        if half == 1 {
            1.0
        } else {
            (1000f64.ln() * i as f64 / (half - 1) as f64).exp()
        }
    };
    out.extend((0..half).map(|i| (omega(i) * tau).sin()));
    out.extend((0..half).map(|i| (omega(i) * tau).cos()));
    out
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub norm2: GroupNorm,
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    pub time: Linear,
    pub skip: Option<Conv3d>,
    pub out_channels: usize,
}

impl ResBlock {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &mut Rng, name: &str, cin: usize, cout: usize, time_dim: usize) -> Self {
        let conv1 = Conv3d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1);
        let conv2 = Conv3d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1);
        scale_param(store, conv2.weight, 0.0);
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv1,
            conv2,
            time: Linear::new(store, rng, &format!("{name}.time"), time_dim, cout),
            skip: (cin != cout).then(|| Conv3d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1, 0)),
            out_channels: cout,
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, temb: Var) -> Result<Var> {
        let a = self.norm1.forward(tape, p, x)?;
        let a = leaky(tape, a);
        let h = self.conv1.forward(tape, p, a)?;
        let te = self.time.forward(tape, p, temb)?;
        let te = tape.reshape(te, &[self.out_channels, 1, 1, 1])?;
        let h = tape.add(h, te)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = leaky(tape, h);
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(tape, p, x)?,
            None => x,
        };
        Ok(tape.add(h, skip)?)
    }
}

/// Single-head self-attention over voxels.
#[derive(Debug, Clone)]
pub struct Attention {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &mut Rng, name: &str, c: usize) -> Self {
        let norm = GroupNorm::new(store, &format!("{name}.norm"), c);
        let q = Linear::new(store, rng, &format!("{name}.q"), c, c);
        let k = Linear::new(store, rng, &format!("{name}.k"), c, c);
        let v = Linear::new(store, rng, &format!("{name}.v"), c, c);
        let out = Linear::new(store, rng, &format!("{name}.out"), c, c);
        scale_param(store, out.weight, 0.0);
        Self { norm, q, k, v, out }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let c = shape[0];
        let n = shape[1] * shape[2] * shape[3];
        let normed = self.norm.forward(tape, p, x)?;
        let flat = tape.reshape(normed, &[c, n])?;
        let tokens = tape.transpose(flat)?;
        let q = self.q.forward(tape, p, tokens)?;
        let k = self.k.forward(tape, p, tokens)?;
        let v = self.v.forward(tape, p, tokens)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, F::of(1.0 / (c as f64).sqrt()));
        let attn = tape.softmax(scores);
        let mixed = tape.matmul(attn, v)?;
        let y = self.out.forward(tape, p, mixed)?;
        let y = tape.transpose(y)?;
        let y = tape.reshape(y, &shape)?;
        Ok(tape.add(x, y)?)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser3d {
    pub config: DenoiserConfig,
    pub time_mlp: Linear,
    pub input: Conv3d,
    pub down_blocks: Vec<ResBlock>,
    pub downsample: Vec<Conv3d>,
    pub mid: ResBlock,
    pub attention: Option<Attention>,
    pub upsample: Vec<Conv3d>,
    pub up_blocks: Vec<ResBlock>,
    pub output_norm: GroupNorm,
    pub output: Conv3d,
    /// Per-timestep weight of the input added before the output tanh.
    pub skip_gain: Vec<f64>,
}

/// Variance assumed for clean grid entries when weighting the input skip;
/// that of a uniform distribution on `[−1, 1]`.
pub const DATA_VARIANCE: f64 = 1.0 / 3.0;

/// Linear least-squares estimate of `x0` from `x_t`, per timestep:
/// `√ᾱ·s² / (ᾱ·s² + 1 − ᾱ)`.
pub fn skip_gains(schedule: &NoiseSchedule) -> Vec<f64> {
    schedule
        .alpha_bar()
        .iter()
        .map(|&ab| ab.sqrt() * DATA_VARIANCE / (ab * DATA_VARIANCE + 1.0 - ab))
        .collect()
}

impl Denoiser3d {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &mut Rng, prefix: &str, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let n = |s: String| format!("{prefix}.{s}");
        let td = config.time_dim;
        let width = |l: usize| config.base_width << l;
        let time_mlp = Linear::new(store, rng, &n("time".into()), td, td);
        let input = Conv3d::new(store, rng, &n("input".into()), config.channels, width(0), 3, 1, 1);
        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        for l in 0..config.levels {
            down_blocks.push(ResBlock::new(store, rng, &n(format!("down{l}.block")), width(l), width(l), td));
            downsample.push(Conv3d::new(store, rng, &n(format!("down{l}.conv")), width(l), width(l + 1), 3, 2, 1));
        }
        let bottom = width(config.levels);
        let mid = ResBlock::new(store, rng, &n("mid.block".into()), bottom, bottom, td);
        let attention = config
            .attention
            .then(|| Attention::new(store, rng, &n("mid.attn".into()), bottom));
        let mut upsample = Vec::new();
        let mut up_blocks = Vec::new();
        for l in (0..config.levels).rev() {
            upsample.push(Conv3d::new(store, rng, &n(format!("up{l}.conv")), width(l + 1), width(l), 3, 1, 1));
            up_blocks.push(ResBlock::new(store, rng, &n(format!("up{l}.block")), 2 * width(l), width(l), td));
        }
        let output_norm = GroupNorm::new(store, &n("output.norm".into()), width(0));
        let output = Conv3d::new(store, rng, &n("output".into()), width(0), config.channels, 3, 1, 1);
        scale_param(store, output.weight, 0.0);
        let schedule = NoiseSchedule::linear(config.steps, DEFAULT_BETA_FIRST, DEFAULT_BETA_LAST)?;
        Ok(Self {
            config,
            time_mlp,
            input,
            down_blocks,
            downsample,
            mid,
            attention,
            upsample,
            up_blocks,
            output_norm,
            output,
            skip_gain: skip_gains(&schedule),
        })
    }

    /// Derives the input skip from `schedule` instead of the default one.
    pub fn with_schedule(mut self, schedule: &NoiseSchedule) -> Result<Self> {
        if schedule.steps() != self.config.steps {
            return Err(Error::Config(format!(
                "denoiser has {} timesteps but the schedule has {}",
                self.config.steps,
                schedule.steps()
            )));
        }
        self.skip_gain = skip_gains(schedule);
        Ok(self)
    }

    /// Predicted clean grid, same shape as `x`, values in `[−1, 1]`.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, t: usize) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(x).to_vec();
        let div = 1usize << cfg.levels;
        if s.len() != 4 || s[0] != cfg.channels || s[1] != s[2] || s[2] != s[3] || s[1] % div != 0 {
            return Err(Error::Input(format!(
                "denoiser expects [{}, S, S, S] with S divisible by {div}, got {s:?}",
                cfg.channels
            )));
        }
        if t >= cfg.steps {
            return Err(Error::Input(format!("timestep {t} outside [0, {})", cfg.steps)));
        }
        let emb = timestep_embedding(t, cfg.steps, cfg.time_dim);
        let emb = tape.constant(Tensor::from_f64([1, cfg.time_dim], &emb)?);
        let temb = self.time_mlp.forward(tape, p, emb)?;
        let temb = leaky(tape, temb);

        let mut h = self.input.forward(tape, p, x)?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for (block, down) in self.down_blocks.iter().zip(&self.downsample) {
            h = block.forward(tape, p, h, temb)?;
            skips.push(h);
            h = down.forward(tape, p, h)?;
        }
        h = self.mid.forward(tape, p, h, temb)?;
        if let Some(attn) = &self.attention {
            h = attn.forward(tape, p, h)?;
        }
        for (up, block) in self.upsample.iter().zip(&self.up_blocks) {
            let u = tape.upsample3d(h, UpsampleMode::Trilinear)?;
            let u = up.forward(tape, p, u)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = tape.concat(&[u, skip], 0)?;
            h = block.forward(tape, p, cat, temb)?;
        }
        let h = self.output_norm.forward(tape, p, h)?;
        let h = leaky(tape, h);
        let out = self.output.forward(tape, p, h)?;
        let skip = tape.scale(x, F::of(self.skip_gain[t]));
        let pre = tape.add(out, skip)?;
        Ok(tape.tanh(pre))
    }

    pub fn predict<F: Float>(&self, store: &ParamStore<F>, x: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv, t)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_distinct() {
        let e: Vec<Vec<f64>> = (0..1000).map(|t| timestep_embedding(t, 1000, 32)).collect();
        for t in 1..1000 {
            let d: f64 = e[t].iter().zip(&e[t - 1]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-3, "t={t}");
        }
    }
}
