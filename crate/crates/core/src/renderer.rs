//! Differentiable emission-absorption rendering of feature grids.

use std::f64::consts::PI;

use holovox_tensor::{Bound, Float, ParamStore, Tape, Tensor, Var};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray};
use crate::nn::{leaky, Linear};
use crate::Rng;

pub const DIRECTION_FREQUENCIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub cube_lo: f64,
    pub cube_hi: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_samples: 32,
            cube_lo: -1.0,
            cube_hi: 1.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config(format!(
                "render.samples must be at least 2, got {}",
                self.n_samples
            )));
        }
        if !(self.cube_hi > self.cube_lo) {
            return Err(Error::Config("empty render cube".into()));
        }
        Ok(())
    }
}

/// `d` followed by `sin(2^k π d)` and `cos(2^k π d)` for `k < levels`.
pub fn positional_encode_direction(d: &Vector3<f64>, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * levels);
    out.extend_from_slice(d.as_slice());
    for k in 0..levels {
        let f = (1u64 << k) as f64 * PI;
        out.extend(d.iter().map(|x| (f * x).sin()));
        out.extend(d.iter().map(|x| (f * x).cos()));
    }
    out
}

pub fn encoded_direction_len(levels: usize) -> usize {
    3 + 6 * levels
}

/// Parametric entry and exit of a ray through the cube `[lo, hi]³`.
pub fn clip_to_cube(ray: &Ray, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let mut enter = 0.0f64;
    let mut exit = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-300 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (t0, t1) = ((lo - o) / d, (hi - o) / d);
        enter = enter.max(t0.min(t1));
        exit = exit.min(t0.max(t1));
    }
    (exit > enter).then_some((enter, exit))
}

/// Maps per-sample grid features and encoded view directions to densities
/// and colors.
pub trait PointDecoder<F: Float> {
    /// `features` is `[M, C]`, `dirs` is `[M, E]`; returns `([M, 1], [M, 3])`.
    fn decode(&self, tape: &mut Tape<F>, p: &Bound, features: Var, dirs: Var) -> Result<(Var, Var)>;

    fn direction_levels(&self) -> usize {
        DIRECTION_FREQUENCIES
    }
}

/// Reads channel 0 as density and channels 1..4 as color.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectDecoder;

impl<F: Float> PointDecoder<F> for DirectDecoder {
    fn decode(&self, tape: &mut Tape<F>, _p: &Bound, features: Var, _dirs: Var) -> Result<(Var, Var)> {
        let sigma = tape.narrow(features, 1, 0, 1)?;
        let rgb = tape.narrow(features, 1, 1, 3)?;
        Ok((sigma, rgb))
    }

    fn direction_levels(&self) -> usize {
        0
    }
}

/// Four hidden leaky-ReLU layers; the input features are concatenated back
/// in at the third, and the encoded view direction joins only the color head.
#[derive(Debug, Clone)]
pub struct RenderMlp {
    pub layers: [Linear; 4],
    pub density: Linear,
    pub color: Linear,
    pub levels: usize,
}

impl RenderMlp {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &mut Rng, prefix: &str, features: usize, hidden: usize) -> Self {
        let levels = DIRECTION_FREQUENCIES;
        let name = |s: &str| format!("{prefix}.{s}");
        let layers = [
            Linear::new(store, rng, &name("l1"), features, hidden),
            Linear::new(store, rng, &name("l2"), hidden, hidden),
            Linear::new(store, rng, &name("l3"), hidden + features, hidden),
            Linear::new(store, rng, &name("l4"), hidden, hidden),
        ];
        let density = Linear::new(store, rng, &name("density"), hidden, 1);
        let color = Linear::new(
            store,
            rng,
            &name("color"),
            hidden + encoded_direction_len(levels),
            3,
        );
        Self {
            layers,
            density,
            color,
            levels,
        }
    }
}

impl<F: Float> PointDecoder<F> for RenderMlp {
    fn decode(&self, tape: &mut Tape<F>, p: &Bound, features: Var, dirs: Var) -> Result<(Var, Var)> {
        let mut h = features;
        for (i, layer) in self.layers.iter().enumerate() {
            if i == 2 {
                h = tape.concat(&[h, features], 1)?;
            }
            let z = layer.forward(tape, p, h)?;
            h = leaky(tape, z);
        }
        let s = self.density.forward(tape, p, h)?;
        let sigma = tape.softplus(s);
        let hd = tape.concat(&[h, dirs], 1)?;
        let c = self.color.forward(tape, p, hd)?;
        Ok((sigma, tape.sigmoid(c)))
    }

    fn direction_levels(&self) -> usize {
        self.levels
    }
}

/// Precomputed ray samples for a set of pixels of one camera.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub width: usize,
    pub height: usize,
    /// Flat pixel index `row·W + col` of each rendered pixel.
    pub pixels: Vec<usize>,
    /// Index into `pixels` of each pixel whose ray hits the cube.
    pub hit_rows: Vec<usize>,
    /// `[hits·N_S, 3]` sample points.
    pub points: Vec<f64>,
    /// Per-hit step length.
    pub deltas: Vec<f64>,
    /// `[hits·N_S, E]` encoded directions.
    pub dirs: Vec<f64>,
    pub dir_len: usize,
    pub n_samples: usize,
}

impl RayBatch {
    pub fn full(camera: &Camera, cfg: &RenderConfig, levels: usize) -> Result<Self> {
        let n = camera.width() as usize * camera.height() as usize;
        Self::for_pixels(camera, cfg, levels, (0..n).collect())
    }

    pub fn for_pixels(camera: &Camera, cfg: &RenderConfig, levels: usize, pixels: Vec<usize>) -> Result<Self> {
        cfg.validate()?;
        let w = camera.width() as usize;
        let h = camera.height() as usize;
        let ns = cfg.n_samples;
        let dir_len = encoded_direction_len(levels);
        let mut batch = RayBatch {
            width: w,
            height: h,
            pixels,
            hit_rows: Vec::new(),
            points: Vec::new(),
            deltas: Vec::new(),
            dirs: Vec::new(),
            dir_len,
            n_samples: ns,
        };
        for (row, &pix) in batch.pixels.iter().enumerate() {
            if pix >= w * h {
                return Err(Error::Input(format!("pixel index {pix} outside {w}x{h} image")));
            }
            let ray = camera.pixel_center_ray((pix % w) as u32, (pix / w) as u32)?;
            let Some((enter, exit)) = clip_to_cube(&ray, cfg.cube_lo, cfg.cube_hi) else {
                continue;
            };
            let delta = (exit - enter) / ns as f64;
            let enc = positional_encode_direction(&ray.direction, levels);
            for i in 0..ns {
                let p = ray.at(enter + (i as f64 + 0.5) * delta);
                batch.points.extend_from_slice(p.as_slice());
                batch.dirs.extend_from_slice(&enc);
            }
            batch.hit_rows.push(row);
            batch.deltas.push(delta);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Renders the batch's pixels from `grid` (`[C, S, S, S]` on the tape).
/// Returns `[P, 4]`: rgb plus residual transmittance per pixel.
pub fn render_rays<F: Float, D: PointDecoder<F> + ?Sized>(
    tape: &mut Tape<F>,
    p: &Bound,
    grid: Var,
    batch: &RayBatch,
    decoder: &D,
    cfg: &RenderConfig,
) -> Result<Var> {
    let rows = batch.len();
    let mut miss = vec![F::one(); 4 * rows];
    for r in 0..rows {
        miss[4 * r..4 * r + 3].iter_mut().for_each(|v| *v = F::zero());
    }
    for &r in &batch.hit_rows {
        miss[4 * r + 3] = F::zero();
    }
    let miss = tape.constant(Tensor::new([rows, 4], miss)?);
    let hits = batch.hit_rows.len();
    if hits == 0 {
        return Ok(miss);
    }
    let m = hits * batch.n_samples;
    let pts = tape.constant(Tensor::from_f64([m, 3], &batch.points)?);
    let feats = tape.sample_trilinear(grid, pts, cfg.cube_lo, cfg.cube_hi)?;
    let dirs = tape.constant(Tensor::from_f64([m, batch.dir_len], &batch.dirs)?);
    let (sigma, rgb) = decoder.decode(tape, p, feats, dirs)?;
    let deltas = batch.deltas.iter().map(|&d| F::of(d)).collect();
    let comp = tape.ea_composite(sigma, rgb, deltas)?;
    let placed = tape.scatter_rows(comp, batch.hit_rows.clone(), rows)?;
    Ok(tape.add(placed, miss)?)
}

/// Full-image render on the tape; returns `(rgb [3, H, W], t_final [H, W])`.
pub fn render_image_var<F: Float, D: PointDecoder<F> + ?Sized>(
    tape: &mut Tape<F>,
    p: &Bound,
    grid: Var,
    batch: &RayBatch,
    decoder: &D,
    cfg: &RenderConfig,
) -> Result<(Var, Var)> {
    let (h, w) = (batch.height, batch.width);
    if batch.len() != h * w {
        return Err(Error::Input("image render needs a full-frame ray batch".into()));
    }
    let out = render_rays(tape, p, grid, batch, decoder, cfg)?;
    let t = tape.transpose(out)?;
    let rgb = tape.narrow(t, 0, 0, 3)?;
    let rgb = tape.reshape(rgb, &[3, h, w])?;
    let trans = tape.narrow(t, 0, 3, 1)?;
    let trans = tape.reshape(trans, &[h, w])?;
    Ok((rgb, trans))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<F: Float> {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor<F>,
    /// `[H, W]` residual transmittance.
    pub transmittance: Tensor<F>,
}

/// Renders a grid from `camera` without keeping a graph.
pub fn render<F: Float, D: PointDecoder<F> + ?Sized>(
    grid: &Tensor<F>,
    camera: &Camera,
    store: &ParamStore<F>,
    decoder: &D,
    cfg: &RenderConfig,
) -> Result<RenderOutput<F>> {
    let batch = RayBatch::full(camera, cfg, decoder.direction_levels())?;
    let mut tape = Tape::new();
    let p = tape.bind(store);
    let g = tape.constant(grid.clone());
    let (rgb, t) = render_image_var(&mut tape, &p, g, &batch, decoder, cfg)?;
    Ok(RenderOutput {
        rgb: tape.value(rgb).clone(),
        transmittance: tape.value(t).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_encoding_lengths() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(positional_encode_direction(&d, 0).len(), 3);
        let e = positional_encode_direction(&d, 4);
        assert_eq!(e.len(), 27);
        assert!(e[3].abs() < 1e-12 && e[4].abs() < 1e-12 && e[5].abs() < 1e-12);
        assert_eq!(&e[6..9], &[1.0, 1.0, -1.0]);
    }

    #[test]
    fn cube_clipping() {
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -3.0),
            direction: Vector3::z(),
        };
        let (a, b) = clip_to_cube(&ray, -1.0, 1.0).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 4.0).abs() < 1e-12);
        let miss = Ray {
            origin: Vector3::new(2.0, 0.0, -3.0),
            direction: Vector3::z(),
        };
        assert!(clip_to_cube(&miss, -1.0, 1.0).is_none());
        let behind = Ray {
            origin: Vector3::new(0.0, 0.0, 3.0),
            direction: Vector3::z(),
        };
        assert!(clip_to_cube(&behind, -1.0, 1.0).is_none());
    }
}
