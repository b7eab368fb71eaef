use holovox::geometry::{Camera, Intrinsics};
use holovox::gradcheck::{axis_camera, test_camera};
use holovox::unprojector::{project_points, PosedImage, Unprojector, UnprojectorConfig};
use holovox::voxel_grid::grid_point_coords;
use holovox_tensor::{ParamStore, Tape, Tensor};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn small_config() -> UnprojectorConfig {
    UnprojectorConfig {
        feature_dim: 6,
        accumulator_hidden: 12,
        grid_channels: 5,
        grid_resolution: 4,
        ..Default::default()
    }
}

fn build(seed: u64, cfg: UnprojectorConfig) -> (Unprojector, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = holovox::Rng::seed_from_u64(seed);
    let u = Unprojector::new(&mut store, &mut rng, cfg);
    (u, store)
}

fn random_image(size: usize, rng: &mut holovox::Rng) -> Tensor<f64> {
    let data = (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new([3, size, size], data).unwrap()
}

fn frames(n: usize, size: usize, seed: u64) -> Vec<PosedImage<f64>> {
    let mut rng = holovox::Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| PosedImage {
            index: i,
            image: random_image(size, &mut rng),
            camera: test_camera(size as u32, 0.9 * i as f64),
        })
        .collect()
}

#[test]
fn encoder_shape_and_identical_inputs() {
    let cfg = UnprojectorConfig { feature_dim: 32, ..small_config() };
    let (u, store) = build(1, cfg);
    let mut rng = holovox::Rng::seed_from_u64(2);
    let img = random_image(32, &mut rng);
    let mut both = img.data().to_vec();
    both.extend_from_slice(img.data());
    let out = u.encode(&store, Tensor::new([2, 3, 32, 32], both).unwrap()).unwrap();
    assert_eq!(out.shape(), &[2, 32, 8, 8]);
    let half = out.len() / 2;
    assert_eq!(&out.data()[..half], &out.data()[half..]);
    assert!(u.encode(&store, Tensor::<f64>::zeros([1, 4, 8, 8])).is_err());
}

#[test]
fn rejects_empty_and_mixed_frames() {
    let (u, store) = build(1, small_config());
    assert!(u.build(&store, &[]).is_err());
    let a = frames(1, 8, 3).remove(0);
    let mut b = frames(1, 16, 4).remove(0);
    b.index = 1;
    assert!(u.build(&store, &[&a, &b]).is_err());
}

/// Brute-force bilinear oracle over a `[C, H, W]` map with cell centers at
/// `i + 0.5` and zero outside the map.
fn bilinear_oracle(fmap: &Tensor<f64>, u: f64, v: f64) -> Vec<f64> {
    let (c, h, w) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
    let mut out = vec![0.0; c];
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    for row in 0..h {
        for col in 0..w {
            let wx = (1.0 - (x - col as f64).abs()).max(0.0);
            let wy = (1.0 - (y - row as f64).abs()).max(0.0);
            for ch in 0..c {
                out[ch] += wx * wy * fmap.data()[(ch * h + row) * w + col];
            }
        }
    }
    out
}

fn sample(fmap: &Tensor<f64>, coords: Vec<f64>, valid: Vec<bool>) -> Vec<f64> {
    let n = valid.len();
    let mut tape = Tape::new();
    let f = tape.constant(fmap.clone());
    let c = tape.constant(Tensor::new([n, 2], coords).unwrap());
    let out = tape.sample_bilinear(f, c, valid).unwrap();
    tape.data(out).to_vec()
}

#[test]
fn frame_features_match_bilinear_oracle() {
    let mut rng = holovox::Rng::seed_from_u64(8);
    let fmap = Tensor::new([3, 6, 6], (0..108).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let cam = axis_camera(24, 3.0, 30.0);
    let pts: Vec<Vector3<f64>> = (0..500)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let (coords, valid) = project_points(&cam, &pts, 6, 6);
    let got = sample(&fmap, coords.clone(), valid.clone());
    let mut inside = 0;
    for (i, p) in pts.iter().enumerate() {
        let pr = cam.project(p);
        if !valid[i] {
            assert!(got[3 * i..3 * i + 3].iter().all(|&v| v == 0.0));
            continue;
        }
        inside += 1;
        let want = bilinear_oracle(&fmap, pr.u / 4.0, pr.v / 4.0);
        for c in 0..3 {
            assert!((got[3 * i + c] - want[c]).abs() < 1e-6);
        }
    }
    assert!(inside > 100);
}

#[test]
fn cell_centers_and_points_behind_camera() {
    let mut rng = holovox::Rng::seed_from_u64(9);
    let fmap = Tensor::new([2, 4, 4], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let cam = axis_camera(16, 3.0, 20.0);
    // back-project the center of feature cell (col 2, row 1) at depth 2.5
    let ray = cam.pixel_ray(2.5 * 4.0, 1.5 * 4.0).unwrap();
    let on_center = ray.at(2.5);
    let behind = Vector3::new(0.0, 0.0, -3.5);
    let (coords, valid) = project_points(&cam, &[on_center, behind], 4, 4);
    assert_eq!(valid, vec![true, false]);
    let got = sample(&fmap, coords, valid);
    for c in 0..2 {
        assert!((got[c] - fmap.data()[(c * 4 + 1) * 4 + 2]).abs() < 1e-9);
        assert_eq!(got[2 + c], 0.0);
    }
}

#[test]
fn single_frame_is_weighted_feature_before_tanh() {
    let cfg = small_config();
    let (u, store) = build(10, cfg);
    let f = frames(1, 8, 11).remove(0);
    let grid = u.build(&store, &[&f]).unwrap();

    let mut tape = Tape::new();
    let p = tape.bind(&store);
    let img = tape.constant(f.image.clone().reshape([1, 3, 8, 8]).unwrap());
    let fmap = u.encoder.forward(&mut tape, &p, img).unwrap();
    let fmap = tape.reshape(fmap, &[6, 2, 2]).unwrap();
    let pts = grid_point_coords(4, -1.0, 1.0);
    let (coords, valid) = project_points(&f.camera, &pts, 2, 2);
    let c = tape.constant(Tensor::new([64, 2], coords).unwrap());
    let feats = tape.sample_bilinear(fmap, c, valid).unwrap();
    let dirs: Vec<f64> = pts
        .iter()
        .flat_map(|x| {
            let d = (f.camera.center() - x).normalize();
            [d.x, d.y, d.z]
        })
        .collect();
    let d = tape.constant(Tensor::new([64, 3], dirs).unwrap());
    let x = tape.concat(&[feats, d], 1).unwrap();
    let (sigma, feat) = u.accumulator.forward(&mut tape, &p, x).unwrap();
    let (sigma, feat) = (tape.data(sigma).to_vec(), tape.data(feat).to_vec());
    assert!(sigma.iter().all(|&s| s >= 0.0));
    for k in 0..64 {
        for ch in 0..5 {
            let want = (sigma[k] * feat[5 * k + ch]).tanh();
            assert!((grid.data()[ch * 64 + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn outside_every_frustum_ignores_content() {
    let (u, store) = build(12, small_config());
    let k = Intrinsics { fx: 8.0, fy: 8.0, cx: 4.0, cy: 4.0 };
    let away = |i: usize| {
        let eye = Vector3::new(0.3 * i as f64, 0.0, 3.0);
        Camera::look_at(eye, eye + Vector3::z(), Vector3::y(), k, 8, 8).unwrap()
    };
    let mut a = frames(2, 8, 13);
    let mut b = frames(2, 8, 14);
    for (i, (fa, fb)) in a.iter_mut().zip(&mut b).enumerate() {
        fa.camera = away(i);
        fb.camera = away(i);
    }
    let ga = u.build(&store, &a.iter().collect::<Vec<_>>()).unwrap();
    let gb = u.build(&store, &b.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(ga, gb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bounded_and_order_invariant(seed in 0u64..10_000, n in 1usize..4) {
        let (u, store) = build(seed, small_config());
        let fs = frames(n, 8, seed + 1);
        let forward: Vec<&PosedImage<f64>> = fs.iter().collect();
        let reversed: Vec<&PosedImage<f64>> = fs.iter().rev().collect();
        let g1 = u.build(&store, &forward).unwrap();
        let g2 = u.build(&store, &reversed).unwrap();
        prop_assert_eq!(g1.shape(), &[5, 4, 4, 4]);
        prop_assert!(g1.data().iter().all(|v| v.abs() <= 1.0));
        prop_assert_eq!(g1, g2);
    }
}
