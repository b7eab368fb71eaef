//! Finite-difference gradient suites over primitives and composed paths.
//!
//! Every case is a scalar loss of the tensors in a [`ParamStore`]. The
//! 64-bit check compares reverse-mode gradients with central differences at
//! 64 bits; the 32-bit check compares the 32-bit reverse pass against the
//! same 64-bit differences, after rounding all inputs to 32 bits.

use holovox_tensor::gradcheck::{relative_error, CoordCheck};
use holovox_tensor::{Bound, Float, ParamId, ParamStore, Tape, Tensor, UpsampleMode, Var};
use nalgebra::{Matrix4, Vector3};
use rand::{Rng as _, SeedableRng};

use crate::denoiser::{Denoiser3d, DenoiserConfig};
use crate::error::Result;
use crate::geometry::{Camera, Intrinsics};
use crate::renderer::{render_rays, PointDecoder, RayBatch, RenderConfig, RenderMlp};
use crate::schedule::NoiseSchedule;
use crate::trainer::{photometric_loss_var, Target};
use crate::unprojector::{PosedImage, Unprojector, UnprojectorConfig};
use crate::Rng;

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub points: usize,
    pub step: f64,
    pub tol64: f64,
    pub tol32: f64,
    pub floor64: f64,
    pub floor32: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            points: 24,
            step: 1e-5,
            tol64: 1e-5,
            tol32: 1e-3,
            floor64: 1e-4,
            floor32: 1e-3,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: String,
    pub bits: u32,
    /// Parameter name of each checked coordinate.
    pub params: Vec<String>,
    pub coords: Vec<CoordCheck>,
    pub tolerance: f64,
    /// Candidates rejected as too close to a non-smooth point.
    pub skipped: usize,
    pub required: usize,
}

impl CaseReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.coords.len() >= self.required && self.coords.iter().all(|c| c.rel_error < self.tolerance)
    }
}

/// A scalar function of the bound store.
pub trait Objective {
    fn loss<F: Float>(&self, tape: &mut Tape<F>, p: &Bound) -> Result<Var>;
}

fn loss_value<F: Float, O: Objective>(obj: &O, store: &ParamStore<F>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.bind(store);
    let l = obj.loss(&mut tape, &p)?;
    Ok(tape.value(l).item().f64())
}

fn analytic<F: Float, O: Objective>(obj: &O, store: &ParamStore<F>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let p = tape.bind(store);
    let l = obj.loss(&mut tape, &p)?;
    let grads = tape.backward(l)?;
    let mut out: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    for (id, g) in grads.params() {
        out[id.0] = g.iter().map(|v| v.f64()).collect();
    }
    Ok(out)
}

/// Random `(param, index)` pairs among `ids`, parameter first so small
/// tensors such as biases are visited too.
pub fn pick_coords(store: &ParamStore<f64>, ids: &[ParamId], n: usize, rng: &mut Rng) -> Vec<(ParamId, usize)> {
    (0..n)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..store.get(id).len()))
        })
        .collect()
}

/// Runs both precisions on up to `cfg.points` of the `candidates`.
///
/// A candidate whose central differences at `step` and `step / 4` disagree
/// sits within `step` of a kink (a leaky-ReLU or clamp boundary somewhere
/// downstream) and is skipped in favor of the next one.
pub fn check_objective<O: Objective>(
    name: &str,
    obj: &O,
    store: &ParamStore<f64>,
    candidates: &[(ParamId, usize)],
    cfg: &SuiteConfig,
) -> Result<[CaseReport; 2]> {
    let store = store.cast::<f32>().cast::<f64>();
    let a64 = analytic(obj, &store)?;
    let a32 = analytic(obj, &store.cast::<f32>())?;
    let mut work = store.clone();
    let mut central = |id: ParamId, i: usize, h: f64| -> Result<f64> {
        let x = store.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = x + h;
        let hi = loss_value(obj, &work)?;
        work.get_mut(id).data_mut()[i] = x - h;
        let lo = loss_value(obj, &work)?;
        work.get_mut(id).data_mut()[i] = x;
        Ok((hi - lo) / (2.0 * h))
    };
    let mut accepted = Vec::with_capacity(cfg.points);
    let mut numeric = Vec::with_capacity(cfg.points);
    let mut skipped = 0;
    for &(id, i) in candidates {
        if accepted.len() == cfg.points {
            break;
        }
        let coarse = central(id, i, cfg.step)?;
        let fine = central(id, i, cfg.step / 4.0)?;
        if relative_error(coarse, fine, cfg.floor64) > 0.1 * cfg.tol64 {
            skipped += 1;
            continue;
        }
        accepted.push((id, i));
        numeric.push(fine);
    }
    let report = |bits: u32, a: &[Vec<f64>], tol: f64, floor: f64| CaseReport {
        name: name.to_string(),
        bits,
        params: accepted.iter().map(|&(id, _)| store.name(id).to_string()).collect(),
        coords: accepted
            .iter()
            .zip(&numeric)
            .map(|(&(id, i), &n)| CoordCheck {
                index: i,
                analytic: a[id.0][i],
                numeric: n,
                rel_error: relative_error(a[id.0][i], n, floor),
            })
            .collect(),
        tolerance: tol,
        skipped,
        required: cfg.points,
    };
    Ok([
        report(64, &a64, cfg.tol64, cfg.floor64),
        report(32, &a32, cfg.tol32, cfg.floor32),
    ])
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinks and poles.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Loss `Σ w ⊙ y` with fixed random weights.
fn weighted<F: Float>(tape: &mut Tape<F>, y: Var, w: &[f64]) -> Result<Var> {
    let wt = tape.constant(Tensor::from_f64(tape.shape(y).to_vec(), w)?);
    let m = tape.mul(y, wt)?;
    Ok(tape.sum(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Scalar,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu,
    Square,
    Reductions,
    Layout,
    Softmax,
    Matmul,
    Conv2dStride1,
    Conv2dStride2,
    Conv3dStride1,
    Conv3dStride2,
    UpsampleNearest,
    UpsampleTrilinear,
    Bilinear,
    Trilinear,
    Composite,
    Scatter,
}

impl Primitive {
    pub const ALL: [Primitive; 26] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Scalar,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Softplus,
        Primitive::LeakyRelu,
        Primitive::Square,
        Primitive::Reductions,
        Primitive::Layout,
        Primitive::Softmax,
        Primitive::Matmul,
        Primitive::Conv2dStride1,
        Primitive::Conv2dStride2,
        Primitive::Conv3dStride1,
        Primitive::Conv3dStride2,
        Primitive::UpsampleNearest,
        Primitive::UpsampleTrilinear,
        Primitive::Bilinear,
        Primitive::Trilinear,
        Primitive::Composite,
        Primitive::Scatter,
    ];

    pub fn name(self) -> String {
        format!("{self:?}").to_lowercase()
    }
}

/// One primitive applied to the store's tensors `x0`, `x1`, ...
pub struct PrimitiveCase {
    pub op: Primitive,
    pub weights: Vec<f64>,
    pub aux: Vec<f64>,
}

impl PrimitiveCase {
    /// The case and its inputs.
    pub fn build(op: Primitive, rng: &mut Rng) -> (Self, ParamStore<f64>) {
        use Primitive::*;
        let mut s = ParamStore::new();
        let mut aux = Vec::new();
        let out_len = match op {
            Add | Sub | Mul => {
                s.add("x0", uniform(&[3, 4, 5], -1.0, 1.0, rng));
                s.add("x1", uniform(&[3, 1, 5], -1.0, 1.0, rng));
                60
            }
            Div => {
                s.add("x0", uniform(&[3, 4, 5], -1.0, 1.0, rng));
                s.add("x1", uniform(&[1, 4, 5], 0.5, 2.0, rng));
                60
            }
            Scalar | Exp | Tanh | Sigmoid | Softplus | Square => {
                s.add("x0", uniform(&[4, 6], -2.0, 2.0, rng));
                24
            }
            Log => {
                s.add("x0", uniform(&[4, 6], 0.2, 3.0, rng));
                24
            }
            LeakyRelu => {
                s.add("x0", away_from_zero(&[4, 6], rng));
                24
            }
            Reductions => {
                s.add("x0", uniform(&[3, 4, 5], -1.0, 1.0, rng));
                1 + 15
            }
            Layout => {
                s.add("x0", uniform(&[4, 3], -1.0, 1.0, rng));
                s.add("x1", uniform(&[4, 2], -1.0, 1.0, rng));
                2 * 4
            }
            Softmax => {
                s.add("x0", uniform(&[3, 7], -2.0, 2.0, rng));
                21
            }
            Matmul => {
                s.add("x0", uniform(&[5, 4], -1.0, 1.0, rng));
                s.add("x1", uniform(&[4, 6], -1.0, 1.0, rng));
                30
            }
            Conv2dStride1 | Conv2dStride2 => {
                s.add("x0", uniform(&[2, 3, 7, 7], -1.0, 1.0, rng));
                s.add("x1", uniform(&[4, 3, 3, 3], -1.0, 1.0, rng));
                let o = if op == Conv2dStride1 { 7 } else { 4 };
                2 * 4 * o * o
            }
            Conv3dStride1 | Conv3dStride2 => {
                s.add("x0", uniform(&[2, 5, 5, 5], -1.0, 1.0, rng));
                s.add("x1", uniform(&[3, 2, 3, 3, 3], -1.0, 1.0, rng));
                let o = if op == Conv3dStride1 { 5 } else { 3 };
                3 * o * o * o
            }
            UpsampleNearest | UpsampleTrilinear => {
                s.add("x0", uniform(&[2, 3, 2, 3], -1.0, 1.0, rng));
                2 * 6 * 4 * 6
            }
            Bilinear => {
                s.add("x0", uniform(&[3, 5, 6], -1.0, 1.0, rng));
                let n = 8;
                let mut uv = Vec::new();
                for _ in 0..n {
                    uv.push(0.5 + rng.random_range(0..5) as f64 + rng.random_range(0.2..0.8));
                    uv.push(0.5 + rng.random_range(0..4) as f64 + rng.random_range(0.2..0.8));
                }
                s.add("x1", Tensor::new([n, 2], uv).unwrap());
                n * 3
            }
            Trilinear => {
                s.add("x0", uniform(&[2, 4, 4, 4], -1.0, 1.0, rng));
                let n = 8;
                let cell = 0.5;
                let mut p = Vec::new();
                for _ in 0..3 * n {
                    let k = rng.random_range(0..3) as f64;
                    p.push(-1.0 + (k + 0.5 + rng.random_range(0.2..0.8)) * cell);
                }
                s.add("x1", Tensor::new([n, 3], p).unwrap());
                n * 2
            }
            Composite => {
                s.add("x0", uniform(&[3, 6], 0.1, 2.0, rng));
                s.add("x1", uniform(&[3, 6, 3], 0.0, 1.0, rng));
                aux = (0..3).map(|_| rng.random_range(0.1..0.5)).collect();
                12
            }
            Scatter => {
                s.add("x0", uniform(&[4, 3], -1.0, 1.0, rng));
                aux = vec![5.0, 0.0, 2.0, 5.0];
                6 * 3
            }
        };
        let weights = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        (Self { op, weights, aux }, s)
    }
}

impl Objective for PrimitiveCase {
    fn loss<F: Float>(&self, t: &mut Tape<F>, p: &Bound) -> Result<Var> {
        use Primitive::*;
        let x0 = p[ParamId(0)];
        let x1 = || p[ParamId(1)];
        let y = match self.op {
            Add => t.add(x0, x1())?,
            Sub => t.sub(x1(), x0)?,
            Mul => t.mul(x0, x1())?,
            Div => t.div(x0, x1())?,
            Scalar => {
                let a = t.scale(x0, F::of(-1.7));
                let b = t.add_scalar(a, F::of(0.3));
                t.neg(b)
            }
            Exp => t.exp(x0),
            Log => t.log(x0),
            Tanh => t.tanh(x0),
            Sigmoid => t.sigmoid(x0),
            Softplus => t.softplus(x0),
            LeakyRelu => t.leaky_relu(x0, 0.01),
            Square => t.square(x0),
            Reductions => {
                let sq = t.square(x0);
                let m = t.mean(sq);
                let m = t.reshape(m, &[1])?;
                let ax = t.sum_axis(x0, 1)?;
                let ax = t.reshape(ax, &[15])?;
                t.concat(&[m, ax], 0)?
            }
            Layout => {
                let c = t.concat(&[x0, x1()], 1)?;
                let tr = t.transpose(c)?;
                t.narrow(tr, 0, 1, 2)?
            }
            Softmax => t.softmax(x0),
            Matmul => t.matmul(x0, x1())?,
            Conv2dStride1 => t.conv2d(x0, x1(), 1, 1)?,
            Conv2dStride2 => t.conv2d(x0, x1(), 2, 1)?,
            Conv3dStride1 => t.conv3d(x0, x1(), 1, 1)?,
            Conv3dStride2 => t.conv3d(x0, x1(), 2, 1)?,
            UpsampleNearest => t.upsample3d(x0, UpsampleMode::Nearest)?,
            UpsampleTrilinear => t.upsample3d(x0, UpsampleMode::Trilinear)?,
            Bilinear => {
                let n = t.shape(x1())[0];
                t.sample_bilinear(x0, x1(), vec![true; n])?
            }
            Trilinear => t.sample_trilinear(x0, x1(), -1.0, 1.0)?,
            Composite => {
                let d = self.aux.iter().map(|&v| F::of(v)).collect();
                t.ea_composite(x0, x1(), d)?
            }
            Scatter => {
                let idx = self.aux.iter().map(|&v| v as usize).collect();
                t.scatter_rows(x0, idx, 6)?
            }
        };
        weighted(t, y, &self.weights)
    }
}

fn all_ids(store: &ParamStore<f64>) -> Vec<ParamId> {
    store.ids().collect()
}

pub fn primitive_reports(cfg: &SuiteConfig) -> Result<Vec<CaseReport>> {
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for op in Primitive::ALL {
        let (case, store) = PrimitiveCase::build(op, &mut rng);
        let coords = pick_coords(&store, &all_ids(&store), 4 * cfg.points, &mut rng);
        out.extend(check_objective(&op.name(), &case, &store, &coords, cfg)?);
    }
    Ok(out)
}

/// A small camera looking at the origin from `-z`, `size × size` pixels.
pub fn test_camera(size: u32, yaw: f64) -> Camera {
    let eye = Vector3::new(3.0 * yaw.sin(), 0.6, -3.0 * yaw.cos());
    let f = 0.5 * size as f64 * 3.0 / 1.3;
    let k = Intrinsics {
        fx: f,
        fy: f,
        cx: 0.5 * size as f64,
        cy: 0.5 * size as f64,
    };
    Camera::look_at(eye, Vector3::zeros(), Vector3::y(), k, size, size).expect("valid camera")
}

fn target_image(size: usize, rng: &mut Rng) -> Tensor<f64> {
    uniform(&[3, size, size], 0.0, 1.0, rng)
}

/// Grid parameter rendered by the render MLP into a photometric loss.
pub struct RenderPath {
    pub mlp: RenderMlp,
    pub grid: ParamId,
    pub target: Target<f64>,
    pub render: RenderConfig,
}

impl Objective for RenderPath {
    fn loss<F: Float>(&self, t: &mut Tape<F>, p: &Bound) -> Result<Var> {
        let target = cast_target(&self.target);
        photometric_loss_var(t, p, p[self.grid], std::slice::from_ref(&target), &self.mlp, &self.render)
    }
}

fn cast_target<F: Float>(t: &Target<f64>) -> Target<F> {
    Target {
        rays: t.rays.clone(),
        colors: t.colors.cast(),
    }
}

fn frame(size: usize, yaw: f64, index: usize, rng: &mut Rng) -> PosedImage<f64> {
    PosedImage {
        index,
        image: target_image(size, rng),
        camera: test_camera(size as u32, yaw),
    }
}

pub fn render_path(rng: &mut Rng) -> Result<(RenderPath, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let grid = store.add("grid", uniform(&[4, 4, 4, 4], -1.0, 1.0, rng));
    let mlp = RenderMlp::new(&mut store, rng, "render", 4, 12);
    let render = RenderConfig {
        n_samples: 8,
        ..RenderConfig::default()
    };
    let f = frame(8, 0.4, 0, rng);
    let target = Target::new(&f, &render, PointDecoder::<f64>::direction_levels(&mlp), None)?;
    Ok((
        RenderPath {
            mlp,
            grid,
            target,
            render,
        },
        store,
    ))
}

/// Fixed noised grid through the UNet, then rendered.
pub struct DenoisePath {
    pub unet: Denoiser3d,
    pub mlp: RenderMlp,
    pub input: Tensor<f64>,
    pub t: usize,
    pub target: Target<f64>,
    pub render: RenderConfig,
}

impl Objective for DenoisePath {
    fn loss<F: Float>(&self, t: &mut Tape<F>, p: &Bound) -> Result<Var> {
        let x = t.constant(self.input.cast());
        let y = self.unet.forward(t, p, x, self.t)?;
        let target = cast_target(&self.target);
        photometric_loss_var(t, p, y, std::slice::from_ref(&target), &self.mlp, &self.render)
    }
}

pub fn tiny_unet_config(channels: usize) -> DenoiserConfig {
    DenoiserConfig {
        channels,
        base_width: 4,
        levels: 2,
        time_dim: 8,
        attention: true,
        steps: 1000,
    }
}

/// Adds uniform noise in `±scale` to every parameter under `prefix`, so
/// zero-initialized layers carry a generic gradient.
pub fn jitter(store: &mut ParamStore<f64>, prefix: &str, scale: f64, rng: &mut Rng) {
    for id in store.group(prefix) {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-scale..scale));
    }
}

pub fn denoise_path(rng: &mut Rng) -> Result<(DenoisePath, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let unet = Denoiser3d::new(&mut store, rng, "denoiser", tiny_unet_config(4))?;
    jitter(&mut store, "denoiser.", 0.1, rng);
    let mlp = RenderMlp::new(&mut store, rng, "render", 4, 12);
    let render = RenderConfig {
        n_samples: 8,
        ..RenderConfig::default()
    };
    let f = frame(8, -0.3, 0, rng);
    let target = Target::new(&f, &render, PointDecoder::<f64>::direction_levels(&mlp), None)?;
    Ok((
        DenoisePath {
            unet,
            mlp,
            input: uniform(&[4, 4, 4, 4], -1.0, 1.0, rng),
            t: 321,
            target,
            render,
        },
        store,
    ))
}

/// Frames through the encoder and accumulator into `V̄`, then rendered.
pub struct EncoderPath {
    pub unprojector: Unprojector,
    pub mlp: RenderMlp,
    pub frames: Vec<PosedImage<f64>>,
    pub target: Target<f64>,
    pub render: RenderConfig,
}

impl Objective for EncoderPath {
    fn loss<F: Float>(&self, t: &mut Tape<F>, p: &Bound) -> Result<Var> {
        let frames: Vec<PosedImage<F>> = self
            .frames
            .iter()
            .map(|f| PosedImage {
                index: f.index,
                image: f.image.cast(),
                camera: f.camera,
            })
            .collect();
        let refs: Vec<&PosedImage<F>> = frames.iter().collect();
        let v = self.unprojector.build_var(t, p, &refs)?;
        let target = cast_target(&self.target);
        photometric_loss_var(t, p, v, std::slice::from_ref(&target), &self.mlp, &self.render)
    }
}

pub fn tiny_unprojector_config() -> UnprojectorConfig {
    UnprojectorConfig {
        feature_dim: 4,
        accumulator_hidden: 8,
        grid_channels: 4,
        grid_resolution: 4,
        lo: -1.0,
        hi: 1.0,
    }
}

pub fn encoder_path(rng: &mut Rng) -> Result<(EncoderPath, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let unprojector = Unprojector::new(&mut store, rng, tiny_unprojector_config());
    let mlp = RenderMlp::new(&mut store, rng, "render", 4, 12);
    let render = RenderConfig {
        n_samples: 8,
        ..RenderConfig::default()
    };
    let frames = vec![frame(8, 0.0, 0, rng), frame(8, 2.0, 1, rng)];
    let f = frame(8, 1.0, 2, rng);
    let target = Target::new(&f, &render, PointDecoder::<f64>::direction_levels(&mlp), None)?;
    Ok((
        EncoderPath {
            unprojector,
            mlp,
            frames,
            target,
            render,
        },
        store,
    ))
}

/// The full two-pass objective with fixed timesteps and noise: frames →
/// V̄ → noise → UNet → render, plus the detached re-noised second pass.
pub struct BootstrapPath {
    pub encoder: EncoderPath,
    pub unet: Denoiser3d,
    pub schedule: NoiseSchedule,
    pub t: usize,
    pub t_prime: usize,
    pub noise: Tensor<f64>,
    pub noise_prime: Tensor<f64>,
    /// First-pass prediction at the base parameters. The second pass treats
    /// it as data, so differences must not see it move.
    pub clean: Tensor<f64>,
}

impl Objective for BootstrapPath {
    fn loss<F: Float>(&self, t: &mut Tape<F>, p: &Bound) -> Result<Var> {
        let e = &self.encoder;
        let frames: Vec<PosedImage<F>> = e
            .frames
            .iter()
            .map(|f| PosedImage {
                index: f.index,
                image: f.image.cast(),
                camera: f.camera,
            })
            .collect();
        let refs: Vec<&PosedImage<F>> = frames.iter().collect();
        let target = [cast_target(&e.target)];
        let vbar = e.unprojector.build_var(t, p, &refs)?;
        let vt = self.schedule.diffuse_var(t, vbar, self.t, self.noise.cast())?;
        let v0 = self.unet.forward(t, p, vt, self.t)?;
        let l1 = photometric_loss_var(t, p, v0, &target, &e.mlp, &e.render)?;
        let d = t.constant(self.clean.cast());
        let vtp = self.schedule.diffuse_var(t, d, self.t_prime, self.noise_prime.cast())?;
        let v0p = self.unet.forward(t, p, vtp, self.t_prime)?;
        let l2 = photometric_loss_var(t, p, v0p, &target, &e.mlp, &e.render)?;
        Ok(t.add(l1, l2)?)
    }
}

pub fn bootstrap_path(rng: &mut Rng) -> Result<(BootstrapPath, ParamStore<f64>)> {
    let (encoder, mut store) = encoder_path(rng)?;
    let unet = Denoiser3d::new(&mut store, rng, "denoiser", tiny_unet_config(4))?;
    jitter(&mut store, "denoiser.", 0.1, rng);
    let mut gauss = || crate::trainer::gaussian::<f64>(&[4, 4, 4, 4], rng);
    let (noise, noise_prime) = (gauss(), gauss());
    let schedule = NoiseSchedule::default();
    let (t, t_prime) = (150, 600);
    let clean = {
        let base = store.cast::<f32>().cast::<f64>();
        let refs: Vec<&PosedImage<f64>> = encoder.frames.iter().collect();
        let vbar = encoder.unprojector.build(&base, &refs)?;
        let vt = schedule.diffuse(&vbar, t, &noise)?;
        unet.predict(&base, &vt, t)?
    };
    Ok((
        BootstrapPath {
            encoder,
            unet,
            schedule,
            t,
            t_prime,
            noise,
            noise_prime,
            clean,
        },
        store,
    ))
}

/// Mean rendered pixel w.r.t. grid features, with point-sampled density/color.
pub struct MeanPixel {
    pub grid: ParamId,
    pub batch: RayBatch,
    pub render: RenderConfig,
}

impl Objective for MeanPixel {
    fn loss<F: Float>(&self, t: &mut Tape<F>, p: &Bound) -> Result<Var> {
        let grid = p[self.grid];
        let softened = t.softplus(grid);
        let out = render_rays(t, p, softened, &self.batch, &crate::renderer::DirectDecoder, &self.render)?;
        let rgb = t.narrow(out, 1, 0, 3)?;
        Ok(t.mean(rgb))
    }
}

pub fn mean_pixel_path(rng: &mut Rng) -> Result<(MeanPixel, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let grid = store.add("grid", uniform(&[4, 4, 4, 4], -1.0, 1.0, rng));
    let render = RenderConfig {
        n_samples: 16,
        ..RenderConfig::default()
    };
    let batch = RayBatch::full(&test_camera(8, 0.7), &render, 0)?;
    Ok((MeanPixel { grid, batch, render }, store))
}

fn group(store: &ParamStore<f64>, prefixes: &[&str]) -> Vec<ParamId> {
    store
        .ids()
        .filter(|&id| prefixes.iter().any(|p| store.name(id).starts_with(p)))
        .collect()
}

/// Composed-path reports: grid→render, θ→denoise→render, encoder→V̄→render,
/// the two-pass objective and a render-only mean-pixel check.
pub fn composed_reports(cfg: &SuiteConfig) -> Result<Vec<CaseReport>> {
    let mut rng = Rng::seed_from_u64(cfg.seed ^ 0xC0FFEE);
    let mut out = Vec::new();

    let (case, store) = render_path(&mut rng)?;
    let coords = pick_coords(&store, &all_ids(&store), 4 * cfg.points, &mut rng);
    out.extend(check_objective("grid->render->loss", &case, &store, &coords, cfg)?);

    let (case, store) = mean_pixel_path(&mut rng)?;
    let coords = pick_coords(&store, &all_ids(&store), 4 * cfg.points, &mut rng);
    out.extend(check_objective("grid->mean pixel", &case, &store, &coords, cfg)?);

    let (case, store) = denoise_path(&mut rng)?;
    let coords = pick_coords(&store, &group(&store, &["denoiser."]), 4 * cfg.points, &mut rng);
    out.extend(check_objective("theta->denoise->render->loss", &case, &store, &coords, cfg)?);

    let (case, store) = encoder_path(&mut rng)?;
    let ids = group(&store, &["encoder.", "accumulator."]);
    let coords = pick_coords(&store, &ids, 4 * cfg.points, &mut rng);
    out.extend(check_objective("encoder->aux grid->loss", &case, &store, &coords, cfg)?);

    let (case, store) = bootstrap_path(&mut rng)?;
    let coords = pick_coords(&store, &all_ids(&store), 4 * cfg.points, &mut rng);
    out.extend(check_objective("two-pass objective", &case, &store, &coords, cfg)?);
    Ok(out)
}

/// Everything `gradcheck --full` runs.
pub fn full_suite(cfg: &SuiteConfig) -> Result<Vec<CaseReport>> {
    let mut out = primitive_reports(cfg)?;
    out.extend(composed_reports(cfg)?);
    Ok(out)
}

/// An axis-aligned camera used by tests; identity rotation, looking down +z.
pub fn axis_camera(size: u32, distance: f64, focal: f64) -> Camera {
    let mut m = Matrix4::identity();
    m[(2, 3)] = distance;
    let c = 0.5 * size as f64;
    Camera::new(
        m,
        Intrinsics {
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
        },
        size,
        size,
    )
    .expect("valid camera")
}
