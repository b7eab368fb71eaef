//! Analytic ellipsoid scenes and ground-truth ray integration.
//!
//! Nothing here touches the trainable renderer: piecewise-constant scenes
//! are integrated exactly segment by segment, smooth fields by adaptive
//! midpoint refinement.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Ray};
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Row-major rotation from world to ellipsoid axes.
    pub rotation: [f64; 9],
    pub density: f64,
    pub color: [f64; 3],
}

impl Ellipsoid {
    fn rot(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation)
    }

    fn local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let q = self.rot() * (p - Vector3::from(self.center));
        Vector3::new(
            q.x / self.semi_axes[0],
            q.y / self.semi_axes[1],
            q.z / self.semi_axes[2],
        )
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.local(p).norm_squared() <= 1.0
    }

    /// Parameter interval along `ray` inside the ellipsoid.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let o = self.local(&ray.origin);
        let r = self.rot() * ray.direction;
        let d = Vector3::new(
            r.x / self.semi_axes[0],
            r.y / self.semi_axes[1],
            r.z / self.semi_axes[2],
        );
        let a = d.norm_squared();
        let b = 2.0 * o.dot(&d);
        let c = o.norm_squared() - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc <= 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // numerically stable roots
        let q = -0.5 * (b + b.signum() * sq);
        let (mut t0, mut t1) = (q / a, c / q);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        let t0 = t0.max(0.0);
        (t1 > t0).then_some((t0, t1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub ellipsoids: Vec<Ellipsoid>,
}

impl SyntheticScene {
    /// 1 to 4 random ellipsoids, all inside `[−0.9, 0.9]³`.
    pub fn random(seed: u64, rng: &mut Rng) -> Self {
        let n = rng.random_range(1..=4);
        let ellipsoids = (0..n)
            .map(|_| {
                let semi_axes = [
                    rng.random_range(0.2..0.5),
                    rng.random_range(0.2..0.5),
                    rng.random_range(0.2..0.5),
                ];
                let center = [
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                ];
                let rot = Rotation3::from_euler_angles(
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                );
                let m = rot.matrix();
                let mut rotation = [0.0; 9];
                for r in 0..3 {
                    for c in 0..3 {
                        rotation[3 * r + c] = m[(r, c)];
                    }
                }
                let color = [
                    rng.random_range(0.15..1.0),
                    rng.random_range(0.15..1.0),
                    rng.random_range(0.15..1.0),
                ];
                Ellipsoid {
                    center,
                    semi_axes,
                    rotation,
                    density: rng.random_range(8.0..30.0),
                    color,
                }
            })
            .collect();
        Self { seed, ellipsoids }
    }

    /// Summed density and density-weighted color at `p`.
    pub fn field(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut emit = [0.0; 3];
        for e in self.ellipsoids.iter().filter(|e| e.contains(p)) {
            sigma += e.density;
            for c in 0..3 {
                emit[c] += e.density * e.color[c];
            }
        }
        if sigma > 0.0 {
            emit.iter_mut().for_each(|v| *v /= sigma);
        }
        (sigma, emit)
    }

    /// Exact emission-absorption integral along `ray`.
    pub fn integrate(&self, ray: &Ray) -> ([f64; 3], f64) {
        let spans: Vec<(f64, f64, &Ellipsoid)> = self
            .ellipsoids
            .iter()
            .filter_map(|e| e.intersect(ray).map(|(a, b)| (a, b, e)))
            .collect();
        let mut cuts: Vec<f64> = spans.iter().flat_map(|&(a, b, _)| [a, b]).collect();
        cuts.sort_by(f64::total_cmp);
        let mut rgb = [0.0; 3];
        let mut trans = 1.0;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let mid = 0.5 * (a + b);
            let mut sigma = 0.0;
            let mut emit = [0.0; 3];
            for &(s0, s1, e) in &spans {
                if s0 <= mid && mid <= s1 {
                    sigma += e.density;
                    for c in 0..3 {
                        emit[c] += e.density * e.color[c];
                    }
                }
            }
            if sigma == 0.0 {
                continue;
            }
            let absorbed = -(-(sigma * (b - a))).exp_m1();
            for c in 0..3 {
                rgb[c] += trans * absorbed * emit[c] / sigma;
            }
            trans *= 1.0 - absorbed;
        }
        (rgb, trans)
    }

    /// `[3, H, W]` ground-truth image in `[0, 1]`.
    pub fn render(&self, camera: &Camera) -> Vec<f64> {
        render_with(camera, |ray| self.integrate(ray).0)
    }
}

pub(crate) fn render_with(camera: &Camera, mut f: impl FnMut(&Ray) -> [f64; 3]) -> Vec<f64> {
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    let mut img = vec![0.0; 3 * w * h];
    for row in 0..h {
        for col in 0..w {
            let ray = camera
                .pixel_center_ray(col as u32, row as u32)
                .expect("pixel in range");
            let rgb = f(&ray);
            for c in 0..3 {
                img[c * w * h + row * w + col] = rgb[c];
            }
        }
    }
    img
}

/// A continuous density/color field.
pub trait Field {
    fn sample(&self, p: &Vector3<f64>) -> (f64, [f64; 3]);
}

impl<T: Fn(&Vector3<f64>) -> (f64, [f64; 3])> Field for T {
    fn sample(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        self(p)
    }
}

/// Emission-absorption integral of a smooth field over `[s0, s1]` along
/// `ray`, doubling the midpoint sub-step count until successive estimates
/// agree to `tol` in every channel.
pub fn integrate_adaptive(field: &dyn Field, ray: &Ray, s0: f64, s1: f64, tol: f64) -> ([f64; 3], f64) {
    let eval = |n: usize| {
        let ds = (s1 - s0) / n as f64;
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        for i in 0..n {
            let (sigma, c) = field.sample(&ray.at(s0 + (i as f64 + 0.5) * ds));
            let absorbed = -(-(sigma * ds)).exp_m1();
            for k in 0..3 {
                rgb[k] += trans * absorbed * c[k];
            }
            trans *= 1.0 - absorbed;
        }
        (rgb, trans)
    };
    let mut n = 64;
    let mut prev = eval(n);
    loop {
        n *= 2;
        let next = eval(n);
        let diff = (0..3)
            .map(|k| (next.0[k] - prev.0[k]).abs())
            .fold((next.1 - prev.1).abs(), f64::max);
        if diff < tol || n >= 1 << 16 {
            return next;
        }
        prev = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(density: f64) -> Ellipsoid {
        Ellipsoid {
            center: [0.0; 3],
            semi_axes: [0.5; 3],
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            density,
            color: [0.2, 0.4, 0.8],
        }
    }

    #[test]
    fn chord_through_sphere() {
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -3.0),
            direction: Vector3::z(),
        };
        let (a, b) = sphere(1.0).intersect(&ray).unwrap();
        assert!((a - 2.5).abs() < 1e-12 && (b - 3.5).abs() < 1e-12);
        let scene = SyntheticScene {
            seed: 0,
            ellipsoids: vec![sphere(2.0)],
        };
        let (rgb, t) = scene.integrate(&ray);
        assert!((t - (-2.0f64).exp()).abs() < 1e-12);
        assert!((rgb[1] - 0.4 * (1.0 - (-2.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn adaptive_integrator_matches_exact_constant_medium() {
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -3.0),
            direction: Vector3::z(),
        };
        let field = |_: &Vector3<f64>| (1.5, [0.3, 0.6, 0.9]);
        let (rgb, t) = integrate_adaptive(&field, &ray, 2.0, 4.0, 1e-9);
        assert!((t - (-3.0f64).exp()).abs() < 1e-12);
        assert!((rgb[2] - 0.9 * (1.0 - (-3.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn overlapping_ellipsoids_mix_by_density() {
        let mut a = sphere(1.0);
        a.color = [1.0, 0.0, 0.0];
        let mut b = sphere(3.0);
        b.color = [0.0, 0.0, 1.0];
        let scene = SyntheticScene {
            seed: 0,
            ellipsoids: vec![a, b],
        };
        let (s, c) = scene.field(&Vector3::zeros());
        assert_eq!(s, 4.0);
        assert_eq!(c, [0.25, 0.0, 0.75]);
    }
}
