//! Auxiliary grid construction: encode source frames, sample their features
//! at every voxel center, and accumulate across frames with a learned weight.

use holovox_tensor::{Bound, Float, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::nn::{leaky, Conv2d, Linear};
use crate::voxel_grid::grid_point_coords;
use crate::Rng;

pub const ENCODER_STRIDE: usize = 4;

/// One posed frame; `index` is its position in the source video.
#[derive(Debug, Clone)]
pub struct PosedImage<F: Float> {
    pub index: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<F>,
    pub camera: Camera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnprojectorConfig {
    pub feature_dim: usize,
    pub accumulator_hidden: usize,
    pub grid_channels: usize,
    pub grid_resolution: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for UnprojectorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            accumulator_hidden: 64,
            grid_channels: 64,
            grid_resolution: 16,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub convs: Vec<Conv2d>,
    pub out_channels: usize,
}

impl ImageEncoder {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &mut Rng, prefix: &str, out_channels: usize) -> Self {
        let widths = [16, 32, 32, out_channels];
        let strides = [2, 2, 1, 1];
        let mut cin = 3;
        let convs = widths
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&cout, stride))| {
                let c = Conv2d::new(store, rng, &format!("{prefix}.conv{i}"), cin, cout, 3, stride, 1);
                cin = cout;
                c
            })
            .collect();
        Self {
            convs,
            out_channels,
        }
    }

    /// `[N, 3, H, W] → [N, d_E, H/4, W/4]`.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Input(format!(
                "encoder expects [N, 3, H, W] images, got {s:?}"
            )));
        }
        let mut h = images;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, p, h)?;
            if i != last {
                h = leaky(tape, h);
            }
        }
        Ok(h)
    }
}

/// Maps `[f; v]` to `[σ_raw; f′]`.
#[derive(Debug, Clone)]
pub struct Accumulator {
    pub hidden: Linear,
    pub out: Linear,
    pub grid_channels: usize,
}

impl Accumulator {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &mut Rng, prefix: &str, feature_dim: usize, hidden: usize, grid_channels: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{prefix}.hidden"), feature_dim + 3, hidden),
            out: Linear::new(store, rng, &format!("{prefix}.out"), hidden, 1 + grid_channels),
            grid_channels,
        }
    }

    /// Returns `(σ ≥ 0 as [N, 1], f′ as [N, d_V])`.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = leaky(tape, h);
        let y = self.out.forward(tape, p, h)?;
        let s = tape.narrow(y, 1, 0, 1)?;
        let sigma = tape.softplus(s);
        let f = tape.narrow(y, 1, 1, self.grid_channels)?;
        Ok((sigma, f))
    }
}

#[derive(Debug, Clone)]
pub struct Unprojector {
    pub encoder: ImageEncoder,
    pub accumulator: Accumulator,
    pub config: UnprojectorConfig,
}

/// Per-point feature-map coordinates and validity for one camera.
pub fn project_points(camera: &Camera, points: &[nalgebra::Vector3<f64>], fmap_w: usize, fmap_h: usize) -> (Vec<f64>, Vec<bool>) {
    let sx = fmap_w as f64 / camera.width() as f64;
    let sy = fmap_h as f64 / camera.height() as f64;
    let mut coords = Vec::with_capacity(2 * points.len());
    let mut valid = Vec::with_capacity(points.len());
    for x in points {
        let pr = camera.project(x);
        let ok = camera.sees(&pr);
        valid.push(ok);
        if ok {
            coords.extend([pr.u * sx, pr.v * sy]);
        } else {
            coords.extend([0.0, 0.0]);
        }
    }
    (coords, valid)
}

impl Unprojector {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &mut Rng, config: UnprojectorConfig) -> Self {
        Self {
            encoder: ImageEncoder::new(store, rng, "encoder", config.feature_dim),
            accumulator: Accumulator::new(
                store,
                rng,
                "accumulator",
                config.feature_dim,
                config.accumulator_hidden,
                config.grid_channels,
            ),
            config,
        }
    }

    /// `V̄` as a `[d_V, S, S, S]` tape value in `[−1, 1]`.
    pub fn build_var<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, frames: &[&PosedImage<F>]) -> Result<Var> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("auxiliary grid needs at least one frame".into()))?;
        let shape = first.image.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Input(format!("frame image must be [3, H, W], got {shape:?}")));
        }
        if frames.iter().any(|f| f.image.shape() != shape.as_slice()) {
            return Err(Error::Input("all frames must share one resolution".into()));
        }
        let mut sorted: Vec<&PosedImage<F>> = frames.to_vec();
        sorted.sort_by_key(|f| f.index);
        let (h, w) = (shape[1], shape[2]);
        let j = sorted.len();
        let mut stacked = Vec::with_capacity(j * 3 * h * w);
        for f in &sorted {
            stacked.extend_from_slice(f.image.data());
        }
        let images = tape.constant(Tensor::new([j, 3, h, w], stacked)?);
        let fmaps = self.encoder.forward(tape, p, images)?;
        let fs = tape.shape(fmaps).to_vec();
        let (de, fh, fw) = (fs[1], fs[2], fs[3]);

        let cfg = &self.config;
        let s = cfg.grid_resolution;
        let points = grid_point_coords(s, cfg.lo, cfg.hi);
        let n = points.len();
        let mut rows = Vec::with_capacity(j);
        for (k, f) in sorted.iter().enumerate() {
            let fmap = tape.narrow(fmaps, 0, k, 1)?;
            let fmap = tape.reshape(fmap, &[de, fh, fw])?;
            let (coords, valid) = project_points(&f.camera, &points, fw, fh);
            let coords = tape.constant(Tensor::from_f64([n, 2], &coords)?);
            let feats = tape.sample_bilinear(fmap, coords, valid)?;
            let center = f.camera.center();
            let dirs: Vec<f64> = points
                .iter()
                .flat_map(|x| {
                    let d = (center - x).normalize();
                    [d.x, d.y, d.z]
                })
                .collect();
            let dirs = tape.constant(Tensor::from_f64([n, 3], &dirs)?);
            rows.push(tape.concat(&[feats, dirs], 1)?);
        }
        let x = tape.concat(&rows, 0)?;
        let (sigma, feat) = self.accumulator.forward(tape, p, x)?;
        let weighted = tape.mul(feat, sigma)?;
        let per_frame = tape.reshape(weighted, &[j, n, cfg.grid_channels])?;
        let summed = tape.sum_axis(per_frame, 0)?;
        let bounded = tape.tanh(summed);
        let channels_first = tape.transpose(bounded)?;
        Ok(tape.reshape(channels_first, &[cfg.grid_channels, s, s, s])?)
    }

    /// Graph-free convenience wrapper around [`build_var`](Self::build_var).
    pub fn build<F: Float>(&self, store: &ParamStore<F>, frames: &[&PosedImage<F>]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let v = self.build_var(&mut tape, &p, frames)?;
        Ok(tape.value(v).clone())
    }

    /// Encoder feature maps `[N, d_E, H/4, W/4]` for the given frames.
    pub fn encode<F: Float>(&self, store: &ParamStore<F>, images: Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let x = tape.constant(images);
        let y = self.encoder.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}
