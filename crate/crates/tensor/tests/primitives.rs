//! Every primitive's reverse-mode gradient against central differences.

use holovox_tensor::gradcheck::{compare, GradCheckConfig};
use holovox_tensor::{Result, Tape, Tensor, UpsampleMode, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Loss = Σ out ⊙ R for a fixed random R, so every output coordinate matters.
fn weighted_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let r = tape.constant(r);
    let p = tape.mul(out, r).unwrap();
    tape.sum(p)
}

fn check(inputs: Vec<Tensor<f64>>, build: &Build<'_>, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = weighted_loss(&mut tape, out, seed);
    let grads = tape.backward(loss).unwrap();
    let cfg = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-5,
        // Σ R⊙out is O(10), so central differences carry ~1e-10 absolute
        // roundoff; below this magnitude the check is effectively absolute.
        floor: 1e-4,
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let eval = |p: &[f64]| {
            let mut tape = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        tape.constant(Tensor::new(t.shape().to_vec(), p.to_vec()).unwrap())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let out = build(&mut tape, &vs).unwrap();
            let loss = weighted_loss(&mut tape, out, seed);
            tape.value(loss).item()
        };
        let coords: Vec<usize> = (0..input.len()).collect();
        let report = compare(&analytic, eval, input.data(), &coords, &cfg);
        assert!(
            report.passed(),
            "input {k}: failures {:?}",
            &report.failures()[..report.failures().len().min(4)]
        );
        worst = worst.max(report.max_rel_error());
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinked or singular functions.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// World coordinates in [-1, 1] whose grid coordinate keeps `margin`
/// away from integer (cell-boundary) values.
fn interior_points(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Tensor<f64> {
    let cell = 2.0 / s as f64;
    let data = (0..3 * n)
        .map(|_| {
            let i = rng.random_range(0..s - 1) as f64;
            let f = rng.random_range(0.1..0.9);
            -1.0 + (i + f + 0.5) * cell
        })
        .collect();
    Tensor::new(vec![n, 3], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn elementwise_and_broadcast(seed in any::<u64>(), r in 1usize..4, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[r, c], -2.0, 2.0);
        let b = away_from_zero(&mut rng, &[r, 1]);
        check(vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]), seed);
        check(vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]), seed);
        check(vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]), seed);
        check(vec![a, b], &|t, v| t.div(v[0], v[1]), seed);
    }

    #[test]
    fn unary_and_scalar(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = away_from_zero(&mut rng, &[n]);
        let pos = rand_tensor(&mut rng, &[n], 0.2, 3.0);
        check(vec![x.clone()], &|t, v| Ok(t.exp(v[0])), seed);
        check(vec![pos], &|t, v| Ok(t.log(v[0])), seed);
        check(vec![x.clone()], &|t, v| Ok(t.tanh(v[0])), seed);
        check(vec![x.clone()], &|t, v| Ok(t.sigmoid(v[0])), seed);
        check(vec![x.clone()], &|t, v| Ok(t.softplus(v[0])), seed);
        check(vec![x.clone()], &|t, v| Ok(t.leaky_relu(v[0], 0.01)), seed);
        check(vec![x.clone()], &|t, v| Ok(t.square(v[0])), seed);
        check(vec![x.clone()], &|t, v| Ok(t.scale(v[0], -1.7)), seed);
        check(vec![x], &|t, v| Ok(t.add_scalar(v[0], 0.3)), seed);
    }

    #[test]
    fn matmul_and_layout(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        check(vec![a.clone(), b], &|t, v| t.matmul(v[0], v[1]), seed);
        check(vec![a.clone()], &|t, v| t.transpose(v[0]), seed);
        check(vec![a.clone()], &|t, v| t.sum_axis(v[0], 0), seed);
        check(vec![a.clone()], &|t, v| t.sum_axis(v[0], 1), seed);
        check(vec![a.clone()], &|t, v| Ok(t.mean(v[0])), seed);
        check(vec![a.clone()], &|t, v| Ok(t.softmax(v[0])), seed);
        check(vec![a.clone()], &|t, v| t.reshape(v[0], &[k, m]), seed);
        let c = rand_tensor(&mut rng, &[m, 2], -1.0, 1.0);
        check(vec![a.clone(), c], &|t, v| t.concat(&[v[0], v[1]], 1), seed);
        let last = k - 1;
        check(vec![a], &|t, v| t.narrow(v[0], 1, last, 1), seed);
    }

    #[test]
    fn convolutions(seed in any::<u64>(), cin in 1usize..3, cout in 1usize..3, stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x2 = rand_tensor(&mut rng, &[2, cin, 5, 4], -1.0, 1.0);
        let w2 = rand_tensor(&mut rng, &[cout, cin, 3, 3], -1.0, 1.0);
        check(vec![x2, w2], &|t, v| t.conv2d(v[0], v[1], stride, 1), seed);
        let x3 = rand_tensor(&mut rng, &[cin, 4, 3, 4], -1.0, 1.0);
        let w3 = rand_tensor(&mut rng, &[cout, cin, 3, 3, 3], -1.0, 1.0);
        check(vec![x3, w3], &|t, v| t.conv3d(v[0], v[1], stride, 1), seed);
    }

    #[test]
    fn upsampling(seed in any::<u64>(), c in 1usize..3, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[c, d, 2, 3], -1.0, 1.0);
        check(vec![x.clone()], &|t, v| t.upsample3d(v[0], UpsampleMode::Nearest), seed);
        check(vec![x], &|t, v| t.upsample3d(v[0], UpsampleMode::Trilinear), seed);
    }

    #[test]
    fn continuous_sampling(seed in any::<u64>(), c in 1usize..4, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = rand_tensor(&mut rng, &[c, 3, 3, 3], -1.0, 1.0);
        let pts = interior_points(&mut rng, n, 3);
        check(vec![grid, pts], &|t, v| t.sample_trilinear(v[0], v[1], -1.0, 1.0), seed);
        let fmap = rand_tensor(&mut rng, &[c, 4, 5], -1.0, 1.0);
        let uv: Vec<f64> = (0..n)
            .flat_map(|_| {
                let u = rng.random_range(0..4) as f64 + rng.random_range(0.1..0.9) + 0.5;
                let v = rng.random_range(0..3) as f64 + rng.random_range(0.1..0.9) + 0.5;
                [u, v]
            })
            .collect();
        let uv = Tensor::new(vec![n, 2], uv).unwrap();
        let valid: Vec<bool> = (0..n).map(|i| i % 3 != 2).collect();
        check(vec![fmap, uv], &move |t, v| t.sample_bilinear(v[0], v[1], valid.clone()), seed);
    }

    #[test]
    fn compositing(seed in any::<u64>(), rays in 1usize..4, samples in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = rand_tensor(&mut rng, &[rays, samples], 0.0, 3.0);
        let rgb = rand_tensor(&mut rng, &[rays, samples, 3], 0.0, 1.0);
        let delta: Vec<f64> = (0..rays).map(|_| rng.random_range(0.05..0.5)).collect();
        check(vec![sigma, rgb], &move |t, v| t.ea_composite(v[0], v[1], delta.clone()), seed);
        let x = rand_tensor(&mut rng, &[rays, 3], -1.0, 1.0);
        let index: Vec<usize> = (0..rays).map(|i| (i * 2 + 1) % (rays + 2)).collect();
        check(vec![x], &move |t, v| t.scatter_rows(v[0], index.clone(), rays + 2), seed);
    }
}
