use holovox::voxel_grid::{grid_point_coords, FeatureGrid};
use holovox_tensor::{Tape, Tensor};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn random_grid(c: usize, s: usize, seed: u64) -> FeatureGrid<f64> {
    let mut rng = holovox::Rng::seed_from_u64(seed);
    let data = (0..c * s * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureGrid::new(Tensor::new([c, s, s, s], data).unwrap()).unwrap()
}

/// Independent oracle: find the 8 lattice centers around `p` by search and
/// weight each by the product of per-axis tent functions.
fn corner_oracle(g: &FeatureGrid<f64>, p: &Vector3<f64>) -> Vec<f64> {
    let s = g.resolution();
    let cell = g.cell_size();
    let (lo, _) = g.extent();
    let first = lo + 0.5 * cell;
    let last = first + (s - 1) as f64 * cell;
    let q = p.map(|x| x.clamp(first, last));
    let mut out = vec![0.0; g.channels()];
    for m in 0..s {
        for n in 0..s {
            for o in 0..s {
                let center = Vector3::new(
                    first + m as f64 * cell,
                    first + n as f64 * cell,
                    first + o as f64 * cell,
                );
                let w: f64 = (0..3)
                    .map(|a| (1.0 - (q[a] - center[a]).abs() / cell).max(0.0))
                    .product();
                if w > 0.0 {
                    for (c, v) in out.iter_mut().enumerate() {
                        *v += w * g.get(c, m, n, o);
                    }
                }
            }
        }
    }
    out
}

fn tape_sample(g: &FeatureGrid<f64>, pts: &[Vector3<f64>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let grid = tape.constant(g.tensor().clone());
    let flat: Vec<f64> = pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let p = tape.constant(Tensor::new([pts.len(), 3], flat).unwrap());
    let (lo, hi) = g.extent();
    let out = tape.sample_trilinear(grid, p, lo, hi).unwrap();
    tape.data(out).to_vec()
}

#[test]
fn thousand_points_match_corner_oracle() {
    let g = random_grid(3, 5, 1);
    let mut rng = holovox::Rng::seed_from_u64(2);
    let pts: Vec<Vector3<f64>> = (0..1000)
        .map(|_| Vector3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)))
        .collect();
    let tape = tape_sample(&g, &pts);
    for (i, p) in pts.iter().enumerate() {
        let want = corner_oracle(&g, p);
        let direct = g.sample(p);
        for c in 0..3 {
            assert!((tape[3 * i + c] - want[c]).abs() < 1e-6, "tape at {p:?}");
            assert!((direct[c] - want[c]).abs() < 1e-6, "direct at {p:?}");
        }
    }
}

#[test]
fn centers_and_midpoints() {
    let g = random_grid(2, 4, 3);
    let pts = g.point_coords();
    let vals = tape_sample(&g, &pts);
    for (k, _) in pts.iter().enumerate() {
        let (m, n, o) = (k / 16, (k / 4) % 4, k % 4);
        assert_eq!(vals[2 * k + 1], g.get(1, m, n, o));
    }
    let a = pts[5];
    let b = pts[6];
    let mid = tape_sample(&g, &[(a + b) / 2.0]);
    assert!((mid[0] - 0.5 * (g.get(0, 0, 1, 1) + g.get(0, 0, 1, 2))).abs() < 1e-15);
}

#[test]
fn single_voxel_grid_is_constant() {
    let g = random_grid(2, 1, 4);
    assert_eq!(grid_point_coords(1, -1.0, 1.0)[0], Vector3::zeros());
    let v = g.sample(&Vector3::new(0.7, -0.2, 3.0));
    assert_eq!(v, vec![g.get(0, 0, 0, 0), g.get(1, 0, 0, 0)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn samples_lie_in_corner_hull(seed in 0u64..1000, p in prop::array::uniform3(-1.0..1.0f64)) {
        let g = random_grid(2, 4, seed);
        let p = Vector3::from(p);
        let v = g.sample(&p);
        let cell = g.cell_size();
        let idx = |x: f64| (((x + 1.0) / cell - 0.5).floor().clamp(0.0, 2.0)) as usize;
        let (i, j, k) = (idx(p.x), idx(p.y), idx(p.z));
        for c in 0..2 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for di in 0..2 { for dj in 0..2 { for dk in 0..2 {
                let x = g.get(c, i + di, j + dj, k + dk);
                lo = lo.min(x);
                hi = hi.max(x);
            }}}
            prop_assert!(v[c] >= lo - 1e-12 && v[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn exactly_multilinear_within_a_cell(seed in 0u64..1000, f in prop::array::uniform3(0.0..1.0f64)) {
        // Fit a·(1-x)(1-y)(1-z) + ... from the 8 corners of cell (1,1,1) and
        // compare at an interior point.
        let g = random_grid(1, 4, seed);
        let cell = g.cell_size();
        let base = -1.0 + 1.5 * cell;
        let corner = |a: usize, b: usize, c: usize| g.get(0, 1 + a, 1 + b, 1 + c);
        let mut fit = 0.0;
        for a in 0..2 { for b in 0..2 { for c in 0..2 {
            let w = |bit: usize, t: f64| if bit == 1 { t } else { 1.0 - t };
            fit += corner(a, b, c) * w(a, f[0]) * w(b, f[1]) * w(c, f[2]);
        }}}
        let p = Vector3::new(base + f[0] * cell, base + f[1] * cell, base + f[2] * cell);
        prop_assert!((g.sample(&p)[0] - fit).abs() < 1e-6);
    }
}

#[test]
fn grid_gradient_passes_away_from_cell_boundaries() {
    use holovox_tensor::gradcheck::{grad_check, GradCheckConfig};
    let g = random_grid(2, 4, 9);
    let pts = Tensor::new([3, 3], vec![0.1, -0.3, 0.55, -0.6, 0.2, 0.05, 0.3, 0.3, -0.4]).unwrap();
    let report = grad_check(
        |t, grid| {
            let p = t.constant(pts.clone());
            let s = t.sample_trilinear(grid, p, -1.0, 1.0)?;
            let sq = t.square(s);
            Ok(t.sum(sq))
        },
        g.tensor(),
        None,
        &GradCheckConfig { tolerance: 1e-5, floor: 1e-8, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures());
}
