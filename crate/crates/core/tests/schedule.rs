use holovox::schedule::{clip, NoiseSchedule};
use holovox::trainer::gaussian;
use holovox_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

#[test]
fn default_schedule_endpoints() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 1000);
    assert_eq!(s.beta()[0], 1e-4);
    assert_eq!(s.beta()[999], 0.02);
    assert!((s.alpha_bar()[0] - (1.0 - 1e-4)).abs() < 1e-15);
    assert!(s.alpha_bar()[999] > 0.0 && s.alpha_bar()[999] < 1e-4);
}

#[test]
fn alpha_bar_is_running_product() {
    let s = NoiseSchedule::default();
    for t in [0, 1, 10, 250, 500, 999] {
        let direct: f64 = (0..=t).map(|i| 1.0 - s.beta()[i]).product();
        assert!((s.alpha_bar()[t] - direct).abs() < 1e-12 * direct.max(1e-300) + 1e-15);
    }
    assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn rejects_bad_schedules() {
    assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
    let x = Tensor::<f64>::zeros([2]);
    assert!(s.diffuse(&x, 10, &x).is_err());
    assert!(s.denoise_step(&x, 0, &x, &x).is_err());
}

#[test]
fn diffuse_moments_match() {
    let s = NoiseSchedule::default();
    let mut rng = holovox::Rng::seed_from_u64(5);
    let x0 = Tensor::new([1], vec![0.6f64]).unwrap();
    let n = 20_000;
    for t in [0, 250, 500, 999] {
        let draws: Vec<f64> = (0..n)
            .map(|_| s.diffuse(&x0, t, &gaussian(&[1], &mut rng)).unwrap().data()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar()[t];
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * 0.6).abs() < 4.0 * se_mean, "mean at t={t}");
        assert!((var - want_var).abs() < 4.0 * se_var, "var at t={t}");
    }
}

#[test]
fn tape_and_tensor_diffusion_agree() {
    let s = NoiseSchedule::default();
    let mut rng = holovox::Rng::seed_from_u64(6);
    let x0: Tensor<f64> = gaussian(&[2, 3], &mut rng);
    let eps: Tensor<f64> = gaussian(&[2, 3], &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x0.clone());
    let y = s.diffuse_var(&mut tape, v, 400, eps.clone()).unwrap();
    assert_eq!(tape.data(y), s.diffuse(&x0, 400, &eps).unwrap().data());
}

#[test]
fn oracle_chain_lands_on_target() {
    let s = NoiseSchedule::default();
    let d = 32;
    let mut rng = holovox::Rng::seed_from_u64(7);
    for run in 0..10 {
        let target: Tensor<f64> = clip(&gaussian(&[d], &mut rng));
        let out = s
            .reverse_chain(&[d], |shape| gaussian(shape, &mut rng), |_, _| Ok(target.clone()))
            .unwrap();
        assert_eq!(out.last_prediction, target);
        let err = out
            .final_state
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "run {run}: L∞ {err}");
    }
}

proptest! {
    #[test]
    fn diffusion_inverts_with_known_noise(seed in 0u64..500, t in 0usize..1000) {
        let s = NoiseSchedule::default();
        let mut rng = holovox::Rng::seed_from_u64(seed);
        let x0: Tensor<f64> = gaussian(&[8], &mut rng);
        let eps: Tensor<f64> = gaussian(&[8], &mut rng);
        let xt = s.diffuse(&x0, t, &eps).unwrap();
        let ab = s.alpha_bar()[t];
        for i in 0..8 {
            let back = (xt.data()[i] - (1.0 - ab).sqrt() * eps.data()[i]) / ab.sqrt();
            prop_assert!((back - x0.data()[i]).abs() < 1e-6 * (1.0 + x0.data()[i].abs()));
        }
    }

    #[test]
    fn denoise_step_clips_prediction(seed in 0u64..500, t in 1usize..1000) {
        let s = NoiseSchedule::default();
        let mut rng = holovox::Rng::seed_from_u64(seed);
        let g: Tensor<f64> = gaussian(&[6], &mut rng);
        let wild = Tensor::new([6], g.data().iter().map(|v| v * 5.0).collect()).unwrap();
        let zero = Tensor::<f64>::zeros([6]);
        let a = s.denoise_step(&zero, t, &wild, &zero).unwrap();
        let b = s.denoise_step(&zero, t, &clip(&wild), &zero).unwrap();
        prop_assert_eq!(a, b);
    }
}
