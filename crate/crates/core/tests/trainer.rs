mod common;

use holovox::gradcheck::axis_camera;
use holovox::model::PARAM_GROUPS;
use holovox::renderer::{DirectDecoder, RenderConfig};
use holovox::schedule::NoiseSchedule;
use holovox::trainer::{
    photometric_loss, sample_generation, sample_one, sample_views, train_step, train_step_on, PlateauConfig,
    PlateauDecay, Target, TrainConfig, TrainState,
};
use holovox::unprojector::PosedImage;
use holovox::{Error, Model};
use holovox_tensor::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

fn target_frame(size: usize, image: Vec<f64>) -> PosedImage<f64> {
    PosedImage {
        index: 0,
        image: Tensor::new([3, size, size], image).unwrap(),
        camera: axis_camera(size as u32, 3.0, 40.0 * size as f64),
    }
}

fn constant_grid(sigma: f64, color: f64) -> Tensor<f64> {
    let mut data = vec![sigma; 64];
    data.extend(std::iter::repeat_n(color, 3 * 64));
    Tensor::new([4, 4, 4, 4], data).unwrap()
}

fn loss_against(grid: &Tensor<f64>, image: Vec<f64>) -> f64 {
    let render = RenderConfig { n_samples: 8, ..Default::default() };
    let target = Target::new(&target_frame(4, image), &render, 0, None).unwrap();
    photometric_loss(grid, &[target], &ParamStore::new(), &DirectDecoder, &render).unwrap()
}

#[test]
fn photometric_loss_examples() {
    // narrow field of view: every ray crosses the cube
    assert_eq!(loss_against(&constant_grid(0.0, 0.7), vec![0.0; 48]), 0.0);
    let opaque = constant_grid(1e4, 0.5);
    assert!((loss_against(&opaque, vec![0.0; 48]) - 0.25).abs() < 1e-9);
    let frame = target_frame(4, vec![0.0; 48]);
    let render = holovox::renderer::render(&opaque, &frame.camera, &ParamStore::new(), &DirectDecoder, &RenderConfig { n_samples: 8, ..Default::default() }).unwrap();
    assert_eq!(loss_against(&opaque, render.rgb.data().to_vec()), 0.0);
}

#[test]
fn photometric_loss_rejects_mismatched_frames() {
    let mut f = target_frame(4, vec![0.0; 48]);
    f.image = Tensor::zeros([3, 5, 5]);
    assert!(Target::new(&f, &RenderConfig::default(), 0, None).is_err());
    let render = RenderConfig::default();
    assert!(photometric_loss(&constant_grid(0.0, 0.0), &[], &ParamStore::new(), &DirectDecoder, &render).is_err());
}

#[test]
fn plateau_rules() {
    let cfg = PlateauConfig { patience: 20, window: 5, ..Default::default() };
    let mut p = PlateauDecay::new(cfg);
    let mut lr = 5e-5;
    for i in 0..200 {
        lr = p.observe(10.0 / (1.0 + i as f64), lr);
    }
    assert_eq!(lr, 5e-5);

    let mut p = PlateauDecay::new(cfg);
    let mut lr = 5e-5;
    for _ in 0..30 {
        lr = p.observe(1.0, lr);
    }
    assert!((lr - 5e-6).abs() < 1e-18);
    for _ in 0..1000 {
        lr = p.observe(1.0, lr);
    }
    assert!((lr - 5e-8).abs() < 1e-20, "at most three decays, got {lr}");
}

proptest! {
    #[test]
    fn views_are_disjoint(seed: u64, n in 2usize..40, ns in 1usize..20, nt in 1usize..6) {
        prop_assume!(ns + nt <= n);
        let mut rng = holovox::Rng::seed_from_u64(seed);
        let (s, t) = sample_views(n, ns, nt, &mut rng);
        prop_assert_eq!(s.len(), ns);
        prop_assert_eq!(t.len(), nt);
        prop_assert!(s.iter().chain(&t).all(|&i| i < n));
        prop_assert!(s.iter().all(|i| !t.contains(i)));
        let mut all: Vec<usize> = s.iter().chain(&t).copied().collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), ns + nt);
    }
}

#[test]
fn identical_seeds_give_identical_steps() {
    let dir = tempfile::tempdir().unwrap();
    let videos = common::dataset(dir.path(), 2, 8, 8, 1);
    let cfg = common::micro_train();
    let run = || {
        let (model, store) = Model::init::<f32>(common::micro_model(), 4).unwrap();
        let mut st = TrainState::new(store, &cfg, holovox::Rng::seed_from_u64(5));
        let reports: Vec<_> = (0..4)
            .map(|_| train_step_on(&model, &mut st, &videos, &cfg).unwrap())
            .collect();
        (reports, st.store.flatten())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0 && r.photometric >= 0.0));
}

#[test]
fn bootstrap_step_reaches_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let videos = common::dataset(dir.path(), 1, 8, 8, 2);
    let cfg = TrainConfig { bootstrap_prob: 1.0, ..common::micro_train() };
    let (model, store) = Model::init::<f32>(common::micro_model(), 6).unwrap();
    let mut st = TrainState::new(store, &cfg, holovox::Rng::seed_from_u64(7));
    let report = train_step(&model, &mut st, &videos[0], &cfg).unwrap();
    assert!(report.bootstrap.is_some() && report.t_prime.is_some());
    assert!((report.loss - report.photometric - report.bootstrap.unwrap()).abs() < 1e-6);
    for group in PARAM_GROUPS {
        let ids = st.store.group(group);
        assert!(!ids.is_empty(), "{group}");
        let moved = ids.iter().any(|id| st.adam.first[id.0].iter().any(|&m| m != 0.0));
        assert!(moved, "group {group} got no gradient");
    }
}

#[test]
fn plain_step_skips_bootstrap() {
    let dir = tempfile::tempdir().unwrap();
    let videos = common::dataset(dir.path(), 1, 8, 8, 2);
    let cfg = TrainConfig { bootstrap_prob: 0.0, ..common::micro_train() };
    let (model, store) = Model::init::<f32>(common::micro_model(), 6).unwrap();
    let mut st = TrainState::new(store, &cfg, holovox::Rng::seed_from_u64(7));
    let r = train_step(&model, &mut st, &videos[0], &cfg).unwrap();
    assert!(r.bootstrap.is_none() && r.t_prime.is_none());
    assert_eq!(r.loss, r.photometric);
    assert_eq!(st.step, 1);
}

#[test]
fn short_videos_and_bad_losses_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let videos = common::dataset(dir.path(), 1, 5, 8, 3);
    let cfg = common::micro_train();
    let (model, mut store) = Model::init::<f32>(common::micro_model(), 8).unwrap();
    let mut st = TrainState::new(store.clone(), &cfg, holovox::Rng::seed_from_u64(9));
    match train_step(&model, &mut st, &videos[0], &cfg) {
        Err(Error::TooFewFrames { scene, have: 5, need: 6 }) => assert_eq!(scene, "0000"),
        other => panic!("expected TooFewFrames, got {other:?}"),
    }
    let cfg = TrainConfig { n_source: 3, ..cfg };
    let id = store.group("render.")[0];
    store.get_mut(id).data_mut()[0] = f32::NAN;
    let mut st = TrainState::new(store, &cfg, holovox::Rng::seed_from_u64(9));
    match train_step(&model, &mut st, &videos[0], &cfg) {
        Err(Error::NonFiniteLoss { step: 0, t, .. }) => assert!(t < 1000),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn oracle_sampler_recovers_target() {
    let s = NoiseSchedule::default();
    let mut rng = holovox::Rng::seed_from_u64(10);
    let target = Tensor::new([2, 2, 2, 2], (0..16).map(|i| i as f64 / 8.0 - 1.0).collect()).unwrap();
    let x = sample_one(&s, &[2, 2, 2, 2], &mut rng, |_, _| Ok(target.clone())).unwrap();
    assert_eq!(x, target);
}

#[test]
fn generated_grids_are_bounded_and_reproducible() {
    let (model, store) = Model::init::<f32>(common::micro_model(), 11).unwrap();
    let draw = || sample_generation(&model, &store, 2, &mut holovox::Rng::seed_from_u64(12)).unwrap();
    let a = draw();
    let b = draw();
    assert_eq!(a, b);
    assert_ne!(a[0], a[1]);
    for g in &a {
        assert_eq!(g.shape(), &[4, 4, 4, 4]);
        assert!(g.data().iter().all(|v| v.abs() <= 1.0));
    }
}
