//! Central finite-difference checks of reverse-mode gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<CoordCheck> {
        self.coords
            .iter()
            .filter(|c| !(c.rel_error < self.tolerance))
            .copied()
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, step: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + step;
    let hi = f(&p);
    p[i] = x[i] - step;
    let lo = f(&p);
    (hi - lo) / (2.0 * step)
}

/// Compares `analytic` against central differences of `eval` around `x`
/// at the listed coordinates.
pub fn compare(
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let coords = coords
        .iter()
        .map(|&i| {
            let numeric = central_difference(&mut eval, x, i, cfg.step);
            CoordCheck {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric, cfg.floor),
            }
        })
        .collect();
    GradCheckReport {
        coords,
        tolerance: cfg.tolerance,
    }
}

/// Checks the gradient of scalar `f` with respect to its input `x`, at
/// `coords` (all coordinates when `None`).
pub fn grad_check(
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    coords: Option<&[usize]>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let loss = f(&mut tape, input)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |p: &[f64]| {
        let mut tape = Tape::new();
        let t = Tensor::new(x.shape().to_vec(), p.to_vec()).expect("same shape");
        let v = tape.constant(t);
        let out = f(&mut tape, v).expect("evaluated once already");
        tape.value(out).item()
    };
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    Ok(compare(&analytic, eval, x.data(), coords, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_in_f64() {
        let x = Tensor::from_f64([4], &[0.3, -1.2, 2.5, 0.01]).unwrap();
        let report = grad_check(
            |t, v| {
                let s = t.square(v);
                Ok(t.sum(s))
            },
            &x,
            None,
            &GradCheckConfig {
                tolerance: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.coords);
        assert!(report.max_rel_error() < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let x = [1.0, 2.0];
        let report = compare(
            &[2.0, 5.0],
            |p| p[0] * p[0] + p[1] * p[1],
            &x,
            &[0, 1],
            &GradCheckConfig::default(),
        );
        let failures = report.failures();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].index, 1);
    }
}
