use holovox::geometry::{framing_intrinsics, Camera, Ray};
use holovox::gradcheck::test_camera;
use holovox::renderer::{
    clip_to_cube, render, DirectDecoder, PointDecoder, RayBatch, RenderConfig, RenderMlp,
};
use holovox_tensor::{ParamStore, Tape, Tensor};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn filled(s: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor<f64> {
    let n = s * s * s;
    let mut data = Vec::with_capacity(4 * n);
    for c in 0..4 {
        for i in 0..n {
            data.push(f(c, i));
        }
    }
    Tensor::new([4, s, s, s], data).unwrap()
}

fn camera(size: u32) -> Camera {
    let k = framing_intrinsics(size, size, 3.0, 1.3);
    Camera::look_at(
        Vector3::new(1.2, 0.9, -2.6),
        Vector3::zeros(),
        Vector3::y(),
        k,
        size,
        size,
    )
    .unwrap()
}

fn cfg(n: usize) -> RenderConfig {
    RenderConfig { n_samples: n, ..Default::default() }
}

#[test]
fn transparent_grid_is_exactly_black() {
    let grid = filled(4, |c, _| if c == 0 { 0.0 } else { 0.8 });
    let out = render(&grid, &camera(16), &ParamStore::new(), &DirectDecoder, &cfg(32)).unwrap();
    assert!(out.rgb.data().iter().all(|&v| v == 0.0));
    assert!(out.transmittance.data().iter().all(|&v| v == 1.0));
}

#[test]
fn homogeneous_medium_matches_closed_form() {
    let (sigma, color) = (1.7, [0.9, 0.4, 0.2]);
    let grid = filled(4, |c, _| if c == 0 { sigma } else { color[c - 1] });
    let cam = camera(24);
    let out = render(&grid, &cam, &ParamStore::new(), &DirectDecoder, &cfg(128)).unwrap();
    let (w, h) = (24usize, 24usize);
    let mut hits = 0;
    for row in 0..h {
        for col in 0..w {
            let ray = cam.pixel_center_ray(col as u32, row as u32).unwrap();
            let len = clip_to_cube(&ray, -1.0, 1.0).map_or(0.0, |(a, b)| b - a);
            hits += (len > 0.0) as usize;
            let opacity = 1.0 - (-sigma * len).exp();
            for c in 0..3 {
                let got = out.rgb.data()[c * w * h + row * w + col];
                assert!((got - opacity * color[c]).abs() < 1e-3, "pixel ({col},{row})");
            }
            let t = out.transmittance.data()[row * w + col];
            assert!((t - (1.0 - opacity)).abs() < 1e-3);
        }
    }
    assert!(hits > w * h / 4);
}

#[test]
fn weights_and_transmittance_sum_to_one() {
    let mut rng = holovox::Rng::seed_from_u64(3);
    let grid = filled(6, |c, _| if c == 0 { rng.random_range(0.0..12.0) } else { 1.0 });
    let out = render(&grid, &camera(20), &ParamStore::new(), &DirectDecoder, &cfg(32)).unwrap();
    let n = 400;
    for i in 0..n {
        let t = out.transmittance.data()[i];
        for c in 0..3 {
            assert!((out.rgb.data()[c * n + i] + t - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn single_sample_of_ln2_is_half_opaque() {
    let ln2 = std::f64::consts::LN_2;
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new([1, 1], vec![ln2]).unwrap());
    let c = tape.constant(Tensor::new([1, 3], vec![1.0, 0.5, 0.0]).unwrap());
    let out = tape.ea_composite(s, c, vec![1.0]).unwrap();
    let v = tape.data(out);
    assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.25).abs() < 1e-12 && v[2] == 0.0);
    assert!((v[3] - 0.5).abs() < 1e-12);
}

fn mlp(seed: u64, features: usize, hidden: usize) -> (RenderMlp, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = holovox::Rng::seed_from_u64(seed);
    let m = RenderMlp::new(&mut store, &mut rng, "render", features, hidden);
    (m, store)
}

#[test]
fn zero_weight_mlp_decodes_to_ln2_and_grey() {
    let (m, mut store) = mlp(1, 6, 16);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new();
    let p = tape.bind(&store);
    let f = tape.constant(Tensor::full([5, 6], 0.3));
    let d = tape.constant(Tensor::full([5, 27], -0.2));
    let (sigma, rgb) = m.decode(&mut tape, &p, f, d).unwrap();
    assert!(tape.data(sigma).iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-12));
    assert!(tape.data(rgb).iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn density_ignores_view_direction() {
    let (m, store) = mlp(2, 6, 16);
    let mut rng = holovox::Rng::seed_from_u64(4);
    let feats: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
    let decode = |dir: f64| {
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let f = tape.constant(Tensor::new([5, 6], feats.clone()).unwrap());
        let d = tape.constant(Tensor::full([5, 27], dir));
        let (s, c) = m.decode(&mut tape, &p, f, d).unwrap();
        (tape.data(s).to_vec(), tape.data(c).to_vec())
    };
    let (s1, c1) = decode(0.1);
    let (s2, c2) = decode(-0.7);
    assert_eq!(s1, s2);
    assert_ne!(c1, c2);
}

#[test]
fn mlp_render_is_pure_and_in_range() {
    let (m, store) = mlp(5, 8, 16);
    let mut rng = holovox::Rng::seed_from_u64(5);
    let data = (0..8 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grid = Tensor::new([8, 4, 4, 4], data).unwrap();
    for yaw in [0.0, 1.0, 2.5] {
        let cam = test_camera(12, yaw);
        let a = render(&grid, &cam, &store, &m, &cfg(16)).unwrap();
        let b = render(&grid, &cam, &store, &m, &cfg(16)).unwrap();
        assert_eq!(a, b);
        assert!(a.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.transmittance.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn partial_batches_match_full_frame() {
    let mut rng = holovox::Rng::seed_from_u64(6);
    let grid = filled(4, |_, _| rng.random_range(0.0..3.0));
    let cam = camera(10);
    let c = cfg(16);
    let full = render(&grid, &cam, &ParamStore::new(), &DirectDecoder, &c).unwrap();
    let pixels = vec![0, 17, 55, 99, 42];
    let batch = RayBatch::for_pixels(&cam, &c, 0, pixels.clone()).unwrap();
    let mut tape = Tape::new();
    let p = tape.bind(&ParamStore::new());
    let g = tape.constant(grid);
    let out = holovox::renderer::render_rays(&mut tape, &p, g, &batch, &DirectDecoder, &c).unwrap();
    let out = tape.data(out);
    for (r, &pix) in pixels.iter().enumerate() {
        for ch in 0..3 {
            let want = full.rgb.data()[ch * 100 + pix];
            assert!((out[4 * r + ch] - want).abs() < 1e-12);
        }
    }
    assert!(RayBatch::for_pixels(&cam, &c, 0, vec![100]).is_err());
}

proptest! {
    #[test]
    fn cube_clip_lands_on_faces(o in prop::array::uniform3(-4.0..4.0f64), d in prop::array::uniform3(-1.0..1.0f64)) {
        let d = Vector3::from(d);
        prop_assume!(d.norm() > 1e-3);
        let ray = Ray { origin: Vector3::from(o), direction: d.normalize() };
        if let Some((a, b)) = clip_to_cube(&ray, -1.0, 1.0) {
            prop_assert!(a >= 0.0 && b > a);
            for s in [a, b] {
                let p = ray.at(s);
                prop_assert!(p.amax() < 1.0 + 1e-9);
            }
            let mid = ray.at(0.5 * (a + b));
            prop_assert!(mid.amax() <= 1.0 + 1e-9);
            if a > 0.0 {
                prop_assert!((ray.at(a).amax() - 1.0).abs() < 1e-9);
            }
            prop_assert!((ray.at(b).amax() - 1.0).abs() < 1e-9);
        } else {
            // a miss never passes through the cube's interior
            for k in 0..200 {
                let p = ray.at(k as f64 * 0.05);
                prop_assert!(p.amax() >= 1.0 - 0.05);
            }
        }
    }
}
