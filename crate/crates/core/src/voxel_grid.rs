//! Feature voxel grids over an axis-aligned cube, with trilinear lookup.

use holovox_tensor::{Float, Tensor};
use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const DEFAULT_LO: f64 = -1.0;
pub const DEFAULT_HI: f64 = 1.0;

/// A `d_V × S × S × S` grid filling `[lo, hi]³`. Axis 1 runs along world x,
/// axis 2 along y and axis 3 along z.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<F: Float> {
    data: Tensor<F>,
    lo: f64,
    hi: f64,
}

impl<F: Float> FeatureGrid<F> {
    pub fn new(data: Tensor<F>) -> Result<Self> {
        Self::with_extent(data, DEFAULT_LO, DEFAULT_HI)
    }

    pub fn with_extent(data: Tensor<F>, lo: f64, hi: f64) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[1] != s[2] || s[2] != s[3] || s[1] == 0 {
            return Err(Error::Input(format!(
                "feature grid must be [C, S, S, S], got {s:?}"
            )));
        }
        if !(hi > lo) {
            return Err(Error::Input(format!("empty grid extent [{lo}, {hi}]")));
        }
        Ok(Self { data, lo, hi })
    }

    pub fn zeros(channels: usize, resolution: usize) -> Self {
        Self {
            data: Tensor::zeros([channels, resolution, resolution, resolution]),
            lo: DEFAULT_LO,
            hi: DEFAULT_HI,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn cell_size(&self) -> f64 {
        (self.hi - self.lo) / self.resolution() as f64
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.data
    }

    pub fn get(&self, c: usize, m: usize, n: usize, o: usize) -> F {
        let s = self.resolution();
        self.data.data()[((c * s + m) * s + n) * s + o]
    }

    /// Voxel-center coordinates in `(m, n, o)` row-major order.
    pub fn point_coords(&self) -> Vec<Vector3<f64>> {
        grid_point_coords(self.resolution(), self.lo, self.hi)
    }

    /// Trilinear lookup at one world point, clamped to the outermost centers.
    pub fn sample(&self, p: &Vector3<f64>) -> Vec<F> {
        let s = self.resolution();
        let cell = self.cell_size();
        let taps: Vec<(usize, usize, f64)> = (0..3)
            .map(|a| axis_weights((p[a] - self.lo) / cell - 0.5, s))
            .collect();
        let vol = s * s * s;
        let d = self.data.data();
        (0..self.channels())
            .map(|c| {
                let mut acc = 0.0;
                for (i, wi) in [(taps[0].0, 1.0 - taps[0].2), (taps[0].1, taps[0].2)] {
                    for (j, wj) in [(taps[1].0, 1.0 - taps[1].2), (taps[1].1, taps[1].2)] {
                        for (k, wk) in [(taps[2].0, 1.0 - taps[2].2), (taps[2].1, taps[2].2)] {
                            acc += wi * wj * wk * d[c * vol + (i * s + j) * s + k].f64();
                        }
                    }
                }
                F::of(acc)
            })
            .collect()
    }

    /// Largest absolute value.
    pub fn max_abs(&self) -> F {
        self.data.max_abs()
    }
}

fn axis_weights(g: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let g = g.clamp(0.0, (n - 1) as f64);
    let lo = (g.floor() as usize).min(n - 2);
    (lo, lo + 1, g - lo as f64)
}

/// Centers `lo + (i + 0.5)·cell` of an `S³` lattice, `(m, n, o)` row-major.
pub fn grid_point_coords(s: usize, lo: f64, hi: f64) -> Vec<Vector3<f64>> {
    let cell = (hi - lo) / s as f64;
    let c = |i: usize| lo + (i as f64 + 0.5) * cell;
    let mut out = Vec::with_capacity(s * s * s);
    for m in 0..s {
        for n in 0..s {
            for o in 0..s {
                out.push(Vector3::new(c(m), c(n), c(o)));
            }
        }
    }
    out
}

/// Flattened `[S³, 3]` coordinates for feeding a tape.
pub fn grid_point_tensor<F: Float>(s: usize, lo: f64, hi: f64) -> Tensor<F> {
    let flat: Vec<f64> = grid_point_coords(s, lo, hi)
        .iter()
        .flat_map(|p| [p.x, p.y, p.z])
        .collect();
    Tensor::from_f64([s * s * s, 3], &flat).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers() {
        let c = grid_point_coords(2, -1.0, 1.0);
        assert_eq!(c[0], Vector3::new(-0.5, -0.5, -0.5));
        assert_eq!(c[7], Vector3::new(0.5, 0.5, 0.5));
        assert_eq!(c[1], Vector3::new(-0.5, -0.5, 0.5));
        assert_eq!(grid_point_coords(1, -1.0, 1.0), vec![Vector3::zeros()]);
        let c = grid_point_coords(16, -1.0, 1.0);
        assert_eq!(c[1].z - c[0].z, 0.125);
    }

    #[test]
    fn rejects_non_cubic() {
        assert!(FeatureGrid::new(Tensor::<f64>::zeros([2, 3, 3, 4])).is_err());
        assert!(FeatureGrid::new(Tensor::<f64>::zeros([3, 3, 3])).is_err());
    }

    #[test]
    fn sample_at_center_and_midpoint() {
        let data: Vec<f64> = (0..2 * 27).map(|i| (i as f64).sin()).collect();
        let g = FeatureGrid::new(Tensor::new([2, 3, 3, 3], data).unwrap()).unwrap();
        let pts = g.point_coords();
        let idx = (1 * 3 + 2) * 3;
        let v = g.sample(&pts[idx]);
        assert!((v[1] - g.get(1, 1, 2, 0)).abs() < 1e-15);
        let mid = (pts[idx] + pts[idx + 1]) / 2.0;
        let v = g.sample(&mid);
        let want = 0.5 * (g.get(0, 1, 2, 0) + g.get(0, 1, 2, 1));
        assert!((v[0] - want).abs() < 1e-14);
    }
}
