//! Raw forward/backward loops behind the tape primitives.

use rayon::prelude::*;

use crate::float::Float;

/// Geometry of a convolution over three spatial axes. 2D convolutions use a
/// unit leading axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = self.in_dims[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }
}

/// Per-output-index source coordinate along one axis, `None` in padding.
fn axis_taps(geom: &ConvGeom, axis: usize, out: usize, tap: usize) -> Vec<Option<usize>> {
    (0..out)
        .map(|o| {
            let i = (o * geom.stride[axis] + tap) as isize - geom.pad[axis] as isize;
            (i >= 0 && (i as usize) < geom.in_dims[axis]).then_some(i as usize)
        })
        .collect()
}

/// Unfolds one input item `[C, D, H, W]` into `[C·kd·kh·kw, Do·Ho·Wo]`.
pub fn im2col<F: Float>(input: &[F], geom: &ConvGeom, col: &mut [F]) {
    let od = geom.out_dims().expect("valid conv geometry");
    let n_out: usize = od.iter().product();
    let [kd, kh, kw] = geom.kernel;
    let [_, h, w] = geom.in_dims;
    let vol = geom.in_volume();
    col.par_chunks_mut(n_out).enumerate().for_each(|(row, dst)| {
        let e = row % kw;
        let b = (row / kw) % kh;
        let a = (row / (kw * kh)) % kd;
        let c = row / (kw * kh * kd);
        let src = &input[c * vol..(c + 1) * vol];
        let zs = axis_taps(geom, 0, od[0], a);
        let ys = axis_taps(geom, 1, od[1], b);
        let xs = axis_taps(geom, 2, od[2], e);
        let mut k = 0;
        for z in &zs {
            for y in &ys {
                match (z, y) {
                    (Some(z), Some(y)) => {
                        let base = (z * h + y) * w;
                        for x in &xs {
                            dst[k] = x.map_or(F::zero(), |x| src[base + x]);
                            k += 1;
                        }
                    }
                    _ => {
                        dst[k..k + xs.len()].iter_mut().for_each(|v| *v = F::zero());
                        k += xs.len();
                    }
                }
            }
        }
    });
}

/// Adjoint of [`im2col`]: folds column gradients back into `dinput`.
pub fn col2im<F: Float>(col: &[F], geom: &ConvGeom, dinput: &mut [F]) {
    let od = geom.out_dims().expect("valid conv geometry");
    let n_out: usize = od.iter().product();
    let [kd, kh, kw] = geom.kernel;
    let [_, h, w] = geom.in_dims;
    let vol = geom.in_volume();
    let taps = kd * kh * kw;
    dinput.par_chunks_mut(vol).enumerate().for_each(|(c, dst)| {
        for t in 0..taps {
            let row = c * taps + t;
            let e = t % kw;
            let b = (t / kw) % kh;
            let a = t / (kw * kh);
            let src = &col[row * n_out..(row + 1) * n_out];
            let zs = axis_taps(geom, 0, od[0], a);
            let ys = axis_taps(geom, 1, od[1], b);
            let xs = axis_taps(geom, 2, od[2], e);
            let mut k = 0;
            for z in &zs {
                for y in &ys {
                    if let (Some(z), Some(y)) = (z, y) {
                        let base = (z * h + y) * w;
                        for x in &xs {
                            if let Some(x) = x {
                                dst[base + x] += src[k];
                            }
                            k += 1;
                        }
                    } else {
                        k += xs.len();
                    }
                }
            }
        }
    });
}

/// Linear interpolation taps along one axis for ×2 upsampling with
/// half-pixel alignment: `(lo, hi, weight_of_hi)` per output index.
pub fn upsample_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Continuous-coordinate interpolation taps along one axis.
///
/// `g` is measured in cell units with sample centers at integers. Values
/// outside `[0, n-1]` clamp to the edge and report a zero derivative.
#[derive(Debug, Clone, Copy)]
pub struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
    pub inside: bool,
}

pub fn axis_tap(g: f64, n: usize) -> AxisTap {
    if n == 1 {
        return AxisTap {
            lo: 0,
            hi: 0,
            frac: 0.0,
            inside: false,
        };
    }
    let max = (n - 1) as f64;
    let (g, inside) = if g < 0.0 {
        (0.0, false)
    } else if g > max {
        (max, false)
    } else {
        (g, true)
    };
    let lo = (g.floor() as usize).min(n - 2);
    AxisTap {
        lo,
        hi: lo + 1,
        frac: g - lo as f64,
        inside,
    }
}

/// Forward emission-absorption compositing of one ray.
/// Returns `(rgb, t_final)`.
pub fn ea_ray<F: Float>(sigma: &[F], rgb: &[F], delta: F) -> ([F; 3], F) {
    let mut trans = F::one();
    let mut out = [F::zero(); 3];
    for (i, &s) in sigma.iter().enumerate() {
        let a = s * delta;
        let absorbed = -(-a).exp_m1();
        let w = trans * absorbed;
        for ch in 0..3 {
            out[ch] += w * rgb[3 * i + ch];
        }
        trans = trans * (-a).exp();
    }
    (out, trans)
}

/// Adjoint of [`ea_ray`]; accumulates into `dsigma` / `drgb`.
pub fn ea_ray_backward<F: Float>(
    sigma: &[F],
    rgb: &[F],
    delta: F,
    g_rgb: [F; 3],
    g_t: F,
    dsigma: Option<&mut [F]>,
    drgb: Option<&mut [F]>,
) {
    let n = sigma.len();
    // after[i] = T_{i+1}, weights[i] = T_i - T_{i+1}
    let mut after = vec![F::zero(); n];
    let mut weights = vec![F::zero(); n];
    let mut trans = F::one();
    for i in 0..n {
        let a = sigma[i] * delta;
        weights[i] = trans * -(-a).exp_m1();
        trans = trans * (-a).exp();
        after[i] = trans;
    }
    let t_final = trans;
    let dot = |i: usize| (0..3).fold(F::zero(), |s, ch| s + rgb[3 * i + ch] * g_rgb[ch]);
    if let Some(drgb) = drgb {
        for i in 0..n {
            for ch in 0..3 {
                drgb[3 * i + ch] += weights[i] * g_rgb[ch];
            }
        }
    }
    if let Some(dsigma) = dsigma {
        let mut suffix = F::zero();
        for k in (0..n).rev() {
            let d_a = dot(k) * after[k] - suffix - g_t * t_final;
            dsigma[k] += d_a * delta;
            suffix += weights[k] * dot(k);
        }
    }
}
