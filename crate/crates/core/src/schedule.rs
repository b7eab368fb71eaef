//! DDPM noise schedule and the x₀-parameterized forward/reverse steps.

use holovox_tensor::{Float, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_FIRST: f64 = 1e-4;
pub const DEFAULT_BETA_LAST: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t` linear from `beta_first` at `t = 0` to `beta_last` at `t = T−1`.
    pub fn linear(steps: usize, beta_first: f64, beta_last: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "diffusion needs at least 2 steps, got {steps}"
            )));
        }
        if !(0.0 < beta_first && beta_first < beta_last && beta_last < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_first < beta_last < 1, got {beta_first} and {beta_last}"
            )));
        }
        let last = (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|t| match t {
                0 => beta_first,
                t if t == steps - 1 => beta_last,
                t => beta_first + (beta_last - beta_first) * t as f64 / last,
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Input(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn diffuse<F: Float>(&self, x0: &Tensor<F>, t: usize, noise: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_t(t)?;
        same_shape("diffuse", x0, noise)?;
        let ab = self.alpha_bar[t];
        Ok(mix(x0, noise, ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Tape version of [`diffuse`](Self::diffuse); `noise` enters as a constant.
    pub fn diffuse_var<F: Float>(&self, tape: &mut Tape<F>, x0: Var, t: usize, noise: Tensor<F>) -> Result<Var> {
        self.check_t(t)?;
        if tape.shape(x0) != noise.shape() {
            return Err(Error::Input(format!(
                "diffuse: noise shape {:?} does not match {:?}",
                noise.shape(),
                tape.shape(x0)
            )));
        }
        let ab = self.alpha_bar[t];
        let signal = tape.scale(x0, F::of(ab.sqrt()));
        let n = tape.constant(noise);
        let n = tape.scale(n, F::of((1.0 - ab).sqrt()));
        Ok(tape.add(signal, n)?)
    }

    /// One reverse step from `t` to `t−1`: the prediction is clipped to
    /// `[−1, 1]`, then `√ᾱ_{t−1}·x̂0 + √(1−ᾱ_{t−1})·noise`.
    pub fn denoise_step<F: Float>(
        &self,
        x_t: &Tensor<F>,
        t: usize,
        x0_hat: &Tensor<F>,
        noise: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        if t == 0 {
            return Err(Error::Input("no reverse step below t = 0".into()));
        }
        self.check_t(t)?;
        same_shape("denoise_step", x_t, x0_hat)?;
        same_shape("denoise_step", x_t, noise)?;
        let ab = self.alpha_bar[t - 1];
        Ok(mix(&clip(x0_hat), noise, ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Runs the chain from pure noise. `noise(shape)` supplies each Gaussian
    /// draw, `denoise(x_t, t)` the clean-signal prediction.
    pub fn reverse_chain<F: Float>(
        &self,
        shape: &[usize],
        mut noise: impl FnMut(&[usize]) -> Tensor<F>,
        mut denoise: impl FnMut(&Tensor<F>, usize) -> Result<Tensor<F>>,
    ) -> Result<ChainOutput<F>> {
        let mut x = noise(shape);
        let mut x0 = clip(&x);
        for t in (1..self.steps()).rev() {
            x0 = clip(&denoise(&x, t)?);
            let eps = noise(shape);
            x = self.denoise_step(&x, t, &x0, &eps)?;
        }
        Ok(ChainOutput {
            final_state: x,
            last_prediction: x0,
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_FIRST, DEFAULT_BETA_LAST).expect("valid defaults")
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput<F: Float> {
    /// `x_0` after the last reverse step.
    pub final_state: Tensor<F>,
    /// Clipped denoiser output from the last step (`t = 1`).
    pub last_prediction: Tensor<F>,
}

pub fn clip<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let one = F::one();
    let data = x.data().iter().map(|v| v.max(-one).min(one)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same length")
}

fn mix<F: Float>(a: &Tensor<F>, b: &Tensor<F>, wa: f64, wb: f64) -> Tensor<F> {
    let (wa, wb) = (F::of(wa), F::of(wb));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| wa * x + wb * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same length")
}

fn same_shape<F: Float>(op: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
