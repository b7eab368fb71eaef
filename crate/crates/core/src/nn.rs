//! Parameterized layers. Layers hold only [`ParamId`]s; values live in a
//! [`ParamStore`] and are bound to a tape once per forward pass.

use holovox_tensor::{Bound, Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::Result;
use crate::Rng;

pub const LEAKY_SLOPE: f64 = 0.01;

/// He uniform weights scaled for a leaky-ReLU of slope [`LEAKY_SLOPE`].
pub fn kaiming_uniform<F: Float>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<F> {
    let a = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.random_range(-a..a))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches")
}

/// Multiplies a parameter in place; used to start residual branches and
/// output heads near zero.
pub fn scale_param<F: Float>(store: &mut ParamStore<F>, id: ParamId, factor: f64) {
    let f = F::of(factor);
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= f);
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<F: Float>(store: &mut ParamStore<F>, rng: &mut Rng, name: &str, in_features: usize, out_features: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[in_features, out_features], in_features, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// `[N, in] → [N, out]`.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        Ok(tape.add(y, p[self.bias])?)
    }
}

/// 2D convolution over `[N, C, H, W]` batches, square kernel, with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let k2 = kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[cout, cin, kernel, kernel], cin * k2, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.weight], self.stride, self.pad)?;
        Ok(tape.add(y, p[self.bias])?)
    }
}

/// 3D convolution over one `[C, D, H, W]` volume, cubic kernel, with bias.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let k3 = kernel * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[cout, cin, kernel, kernel, kernel], cin * k3, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv3d(x, p[self.weight], self.stride, self.pad)?;
        Ok(tape.add(y, p[self.bias])?)
    }
}

/// Group normalization of one `[C, D, H, W]` volume with a per-channel
/// affine map.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Largest group count `≤ 8` that divides `channels` and leaves at least
/// two channels per group.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels / 2).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels, 1, 1, 1], F::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels, 1, 1, 1]));
        Self {
            gamma,
            beta,
            groups: group_count(channels),
            channels,
        }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let g = self.groups;
        let per = tape.value(x).len() / g;
        let inv = F::of(1.0 / per as f64);
        let flat = tape.reshape(x, &[g, per])?;
        let sum = tape.sum_axis(flat, 1)?;
        let mean = tape.scale(sum, inv);
        let mean = tape.reshape(mean, &[g, 1])?;
        let centered = tape.sub(flat, mean)?;
        let sq = tape.square(centered);
        let var = tape.sum_axis(sq, 1)?;
        let var = tape.scale(var, inv);
        let var = tape.add_scalar(var, F::of(GROUP_NORM_EPS));
        let log_var = tape.log(var);
        let half = tape.scale(log_var, F::of(-0.5));
        let inv_std = tape.exp(half);
        let inv_std = tape.reshape(inv_std, &[g, 1])?;
        let normed = tape.mul(centered, inv_std)?;
        let normed = tape.reshape(normed, &shape)?;
        let scaled = tape.mul(normed, p[self.gamma])?;
        Ok(tape.add(scaled, p[self.beta])?)
    }
}

pub fn leaky<F: Float>(tape: &mut Tape<F>, x: Var) -> Var {
    tape.leaky_relu(x, LEAKY_SLOPE)
}
