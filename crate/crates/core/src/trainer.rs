//! Bootstrapped diffusion training and generative sampling.

use holovox_tensor::{Adam, AdamConfig, Bound, Float, ParamStore, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::renderer::{render_rays, PointDecoder, RayBatch, RenderConfig};
use crate::schedule::NoiseSchedule;
use crate::unprojector::PosedImage;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub window: usize,
    pub max_decays: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 200,
            threshold: 0.01,
            window: 50,
            max_decays: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub learning_rate: f64,
    pub bootstrap_prob: f64,
    /// Pixels rendered per target view; 0 renders every pixel.
    pub rays_per_target: usize,
    pub max_steps: u64,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_source: 10,
            n_target: 3,
            learning_rate: 5e-5,
            bootstrap_prob: 0.5,
            rays_per_target: 0,
            max_steps: 2000,
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::Config("need at least one source and one target view".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bootstrap_prob) {
            return Err(Error::Config("bootstrap probability must lie in [0, 1]".into()));
        }
        let p = &self.plateau;
        if p.window < 2 || !(0.0 < p.factor && p.factor < 1.0) || p.patience == 0 {
            return Err(Error::Config(
                "plateau needs window >= 2, patience >= 1 and 0 < factor < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Ten-fold (by default) learning-rate decay when the windowed mean loss
/// stops improving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauDecay {
    pub config: PlateauConfig,
    pub history: Vec<f64>,
    /// Best windowed mean so far; `None` until the first full window.
    pub best: Option<f64>,
    pub since_best: usize,
    pub decays: usize,
}

impl PlateauDecay {
    pub fn new(config: PlateauConfig) -> Self {
        Self {
            config,
            history: Vec::new(),
            best: None,
            since_best: 0,
            decays: 0,
        }
    }

    /// Records one loss and returns the (possibly decayed) learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        let c = self.config;
        self.history.push(loss);
        if self.history.len() > c.window {
            self.history.remove(0);
        }
        if self.history.len() < c.window {
            return lr;
        }
        let mean = self.history.iter().sum::<f64>() / c.window as f64;
        if self.best.is_none_or(|b| mean < b * (1.0 - c.threshold)) {
            self.best = Some(mean);
            self.since_best = 0;
            return lr;
        }
        self.since_best += 1;
        if self.since_best >= c.patience && self.decays < c.max_decays {
            self.decays += 1;
            self.since_best = 0;
            self.best = Some(mean);
            return lr * c.factor;
        }
        lr
    }
}

#[derive(Debug, Clone)]
pub struct PosedVideo {
    pub id: String,
    pub frames: Vec<PosedImage<f32>>,
}

impl PosedVideo {
    /// The frames at `positions`, keeping their original indices.
    pub fn subset(&self, positions: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            frames: positions.iter().map(|&i| self.frames[i].clone()).collect(),
        }
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub rng: Rng,
    pub lr: f64,
    pub plateau: PlateauDecay,
}

impl TrainState {
    pub fn new(store: ParamStore<f32>, cfg: &TrainConfig, rng: Rng) -> Self {
        let adam = Adam::new(&store, AdamConfig::default());
        Self {
            store,
            adam,
            step: 0,
            rng,
            lr: cfg.learning_rate,
            plateau: PlateauDecay::new(cfg.plateau),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub scene: String,
    pub loss: f64,
    pub photometric: f64,
    pub bootstrap: Option<f64>,
    pub t: usize,
    pub t_prime: Option<usize>,
    pub lr: f64,
}

pub fn gaussian<F: Float>(shape: &[usize], rng: &mut Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches")
}

/// Render targets with their ground-truth pixel colors `[P, 3]`.
#[derive(Debug, Clone)]
pub struct Target<F: Float> {
    pub rays: RayBatch,
    pub colors: Tensor<F>,
}

impl<F: Float> Target<F> {
    /// `pixels = None` targets the whole image.
    pub fn new(frame: &PosedImage<F>, render: &RenderConfig, levels: usize, pixels: Option<Vec<usize>>) -> Result<Self> {
        let (h, w) = (frame.image.shape()[1], frame.image.shape()[2]);
        if frame.camera.width() as usize != w || frame.camera.height() as usize != h {
            return Err(Error::Input(format!(
                "frame {} is {w}x{h} but its camera is {}x{}",
                frame.index,
                frame.camera.width(),
                frame.camera.height()
            )));
        }
        let pixels = pixels.unwrap_or_else(|| (0..w * h).collect());
        let img = frame.image.data();
        let mut colors = Vec::with_capacity(3 * pixels.len());
        for &pix in &pixels {
            colors.extend((0..3).map(|c| img[c * w * h + pix]));
        }
        let colors = Tensor::new([pixels.len(), 3], colors)?;
        let rays = RayBatch::for_pixels(&frame.camera, render, levels, pixels)?;
        Ok(Self { rays, colors })
    }
}

/// Mean squared error between renders of `grid` and the targets, averaged
/// over targets, pixels and channels.
pub fn photometric_loss_var<F: Float, D: PointDecoder<F> + ?Sized>(
    tape: &mut Tape<F>,
    p: &Bound,
    grid: Var,
    targets: &[Target<F>],
    decoder: &D,
    render: &RenderConfig,
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Input("photometric loss needs at least one target".into()));
    }
    let mut total: Option<Var> = None;
    for target in targets {
        let out = render_rays(tape, p, grid, &target.rays, decoder, render)?;
        let rgb = tape.narrow(out, 1, 0, 3)?;
        let gt = tape.constant(target.colors.clone());
        let diff = tape.sub(rgb, gt)?;
        let sq = tape.square(diff);
        let m = tape.mean(sq);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, F::of(1.0 / targets.len() as f64)))
}

/// Graph-free [`photometric_loss_var`] for an already-computed grid.
pub fn photometric_loss<F: Float, D: PointDecoder<F> + ?Sized>(
    grid: &Tensor<F>,
    targets: &[Target<F>],
    store: &ParamStore<F>,
    decoder: &D,
    render: &RenderConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.bind(store);
    let g = tape.constant(grid.clone());
    let l = photometric_loss_var(&mut tape, &p, g, targets, decoder, render)?;
    Ok(tape.value(l).item().f64())
}

/// Disjoint random source and target frame positions.
pub fn sample_views(n_frames: usize, n_source: usize, n_target: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_frames).collect();
    order.shuffle(rng);
    let targets = order[n_source..n_source + n_target].to_vec();
    order.truncate(n_source);
    (order, targets)
}

/// Random draws of one step, taken in a fixed order from the state RNG.
struct StepDraws {
    sources: Vec<usize>,
    targets: Vec<usize>,
    pixels: Vec<Option<Vec<usize>>>,
    t: usize,
    t_prime: Option<usize>,
}

/// One optimization step on `video`.
pub fn train_step(model: &Model, state: &mut TrainState, video: &PosedVideo, cfg: &TrainConfig) -> Result<LossReport> {
    let need = cfg.n_source + cfg.n_target;
    if video.frames.len() < need {
        return Err(Error::TooFewFrames {
            scene: video.id.clone(),
            have: video.frames.len(),
            need,
        });
    }
    let steps = model.schedule.steps();
    let rng = &mut state.rng;
    let (sources, targets) = sample_views(video.frames.len(), cfg.n_source, cfg.n_target, rng);
    let pixels = targets
        .iter()
        .map(|&i| {
            let img = video.frames[i].image.shape();
            let n = img[1] * img[2];
            (cfg.rays_per_target > 0 && cfg.rays_per_target < n)
                .then(|| rand::seq::index::sample(rng, n, cfg.rays_per_target).into_vec())
        })
        .collect();
    let t = rng.random_range(0..steps);
    let bootstrap = rng.random_bool(cfg.bootstrap_prob);
    let t_prime = bootstrap.then(|| rng.random_range(0..steps));
    let draws = StepDraws {
        sources,
        targets,
        pixels,
        t,
        t_prime,
    };
    let report = run_step(model, state, video, &draws)?;
    let lr = state.lr;
    state.adam.step(&mut state.store, lr);
    state.lr = state.plateau.observe(report.loss, lr);
    state.step += 1;
    Ok(report)
}

fn run_step(model: &Model, state: &mut TrainState, video: &PosedVideo, d: &StepDraws) -> Result<LossReport> {
    let shape = model.config.grid_shape();
    let render = &model.config.render;
    let levels = PointDecoder::<f32>::direction_levels(&model.render);
    let targets = d
        .targets
        .iter()
        .zip(&d.pixels)
        .map(|(&i, px)| Target::new(&video.frames[i], render, levels, px.clone()))
        .collect::<Result<Vec<_>>>()?;
    let sources: Vec<&PosedImage<f32>> = d.sources.iter().map(|&i| &video.frames[i]).collect();
    let noise = gaussian(&shape, &mut state.rng);
    let noise_prime = d.t_prime.map(|_| gaussian(&shape, &mut state.rng));

    let mut tape = Tape::new();
    let p = tape.bind(&state.store);
    let vbar = model.unprojector.build_var(&mut tape, &p, &sources)?;
    let vt = model.schedule.diffuse_var(&mut tape, vbar, d.t, noise)?;
    let v0 = model.denoiser.forward(&mut tape, &p, vt, d.t)?;
    let photo = photometric_loss_var(&mut tape, &p, v0, &targets, &model.render, render)?;
    let mut loss = photo;
    let mut boot = None;
    if let (Some(tp), Some(eps)) = (d.t_prime, noise_prime) {
        let clean = tape.detach(v0);
        let vtp = model.schedule.diffuse_var(&mut tape, clean, tp, eps)?;
        let v0p = model.denoiser.forward(&mut tape, &p, vtp, tp)?;
        let b = photometric_loss_var(&mut tape, &p, v0p, &targets, &model.render, render)?;
        boot = Some(b);
        loss = tape.add(photo, b)?;
    }
    let value = tape.value(loss).item().f64();
    let non_finite = || Error::NonFiniteLoss {
        step: state.step,
        t: d.t,
        t_prime: d.t_prime,
    };
    if !value.is_finite() {
        return Err(non_finite());
    }
    let grads = match tape.backward(loss) {
        Err(TensorError::NonFinite(_)) => return Err(non_finite()),
        other => other?,
    };
    state.store.zero_grad();
    grads.accumulate_into(&mut state.store);
    Ok(LossReport {
        step: state.step,
        scene: video.id.clone(),
        loss: value,
        photometric: tape.value(photo).item().f64(),
        bootstrap: boot.map(|b| tape.value(b).item().f64()),
        t: d.t,
        t_prime: d.t_prime,
        lr: state.lr,
    })
}

/// Picks a video uniformly and runs one [`train_step`] on it.
pub fn train_step_on(model: &Model, state: &mut TrainState, videos: &[PosedVideo], cfg: &TrainConfig) -> Result<LossReport> {
    if videos.is_empty() {
        return Err(Error::Input("no training videos".into()));
    }
    let i = state.rng.random_range(0..videos.len());
    train_step(model, state, &videos[i], cfg)
}

/// Draws `n` grids by running the full reverse chain from pure noise.
pub fn sample_generation<F: Float>(
    model: &Model,
    store: &ParamStore<F>,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Tensor<F>>> {
    let shape = model.config.grid_shape();
    (0..n)
        .map(|_| sample_one(&model.schedule, &shape, rng, |x, t| model.denoiser.predict(store, x, t)))
        .collect()
}

/// Reverse chain with an arbitrary denoiser; returns the last clipped prediction.
pub fn sample_one<F: Float>(
    schedule: &NoiseSchedule,
    shape: &[usize],
    rng: &mut Rng,
    denoise: impl FnMut(&Tensor<F>, usize) -> Result<Tensor<F>>,
) -> Result<Tensor<F>> {
    let out = schedule.reverse_chain(shape, |s| gaussian(s, rng), denoise)?;
    Ok(out.last_prediction)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plateau(patience: usize) -> PlateauDecay {
        PlateauDecay::new(PlateauConfig {
            patience,
            window: 5,
            ..PlateauConfig::default()
        })
    }

    #[test]
    fn decreasing_loss_keeps_lr() {
        let mut p = plateau(10);
        let mut lr = 5e-5;
        for i in 0..500 {
            lr = p.observe(1.0 * 0.95f64.powi(i), lr);
        }
        assert_eq!(lr, 5e-5);
    }

    #[test]
    fn constant_loss_decays_once_then_floors() {
        let mut p = plateau(10);
        let mut lr = 5e-5;
        for _ in 0..20 {
            lr = p.observe(1.0, lr);
        }
        assert!((lr - 5e-6).abs() < 1e-18);
        for _ in 0..1000 {
            lr = p.observe(1.0, lr);
        }
        assert_eq!(p.decays, 3);
        assert!((lr - 5e-8).abs() < 1e-20);
    }

    #[test]
    fn views_are_disjoint() {
        use rand::SeedableRng;
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (s, t) = sample_views(16, 10, 3, &mut rng);
            assert_eq!(s.len(), 10);
            assert_eq!(t.len(), 3);
            assert!(s.iter().all(|i| !t.contains(i)));
        }
    }
}
