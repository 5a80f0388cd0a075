//! Closed-form predictor derivatives against finite differences.

use enm_core::mixture::{Component, GaussianMixture};
use enm_core::predictor::{finite_difference_vjp, NoisePredictor};
use enm_core::schedule::NoiseSchedule;
use enm_core::vector::{l2_norm, sub};
use enm_core::Condition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mixture(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> GaussianMixture {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let components = raw
        .iter()
        .enumerate()
        .map(|(i, w)| Component {
            weight: w / total,
            mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            sigma: rng.random_range(0.3..1.2),
            class: (i % 2) as u32,
        })
        .collect();
    GaussianMixture::new(dim, components).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    l2_norm(&sub(a, b)) / l2_norm(b)
}

#[test]
fn oracle_eps_matches_log_density_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let schedule = NoiseSchedule::default_with_steps(50).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..=4);
        let gmm = random_mixture(&mut rng, dim, 3);
        let t = rng.random_range(0..=50);
        let alpha = schedule.alpha_cum(t);
        let cond = if rng.random_bool(0.5) {
            Condition::Unconditional
        } else {
            Condition::Class(rng.random_range(0..2))
        };
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.5..2.5)).collect();
        let marginal = gmm.marginal_at(alpha, cond).unwrap();
        let mut probe = z.clone();
        let fd: Vec<f64> = (0..dim)
            .map(|i| {
                probe[i] = z[i] + h;
                let plus = marginal.log_density(&probe).unwrap();
                probe[i] = z[i] - h;
                let minus = marginal.log_density(&probe).unwrap();
                probe[i] = z[i];
                -(1.0 - alpha).sqrt() * (plus - minus) / (2.0 * h)
            })
            .collect();
        let eps = gmm.oracle_eps(&z, alpha, cond).unwrap();
        let e = rel_err(&eps, &fd);
        worst = worst.max(e);
        assert!(e <= 1e-5, "t={t} rel={e:e}");
    }
    println!("worst relative score error {worst:e}");
}

#[test]
fn oracle_vjp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let schedule = NoiseSchedule::default_with_steps(50).unwrap();
    for _ in 0..100 {
        let dim = rng.random_range(1..=5);
        let gmm = random_mixture(&mut rng, dim, 3);
        let t = rng.random_range(0..=50);
        let level = schedule.level(t);
        let cond = Condition::Class(rng.random_range(0..2));
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.5..2.5)).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = gmm.vjp(&z, &level, cond, &v).unwrap();
        let fd = finite_difference_vjp(&gmm, &z, &level, cond, &v, 1e-5).unwrap();
        let e = rel_err(&exact, &fd);
        assert!(e <= 1e-4, "t={t} rel={e:e}");
    }
}

#[test]
fn vjp_is_linear_in_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let schedule = NoiseSchedule::default_with_steps(50).unwrap();
    for _ in 0..100 {
        let dim = rng.random_range(1..=6);
        let gmm = random_mixture(&mut rng, dim, 4);
        let level = schedule.level(rng.random_range(0..=50));
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v1: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v2: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + b * y).collect();
        let lhs = gmm.vjp(&z, &level, Condition::Unconditional, &mix).unwrap();
        let j1 = gmm.vjp(&z, &level, Condition::Unconditional, &v1).unwrap();
        let j2 = gmm.vjp(&z, &level, Condition::Unconditional, &v2).unwrap();
        for i in 0..dim {
            let rhs = a * j1[i] + b * j2[i];
            assert!((lhs[i] - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }
}

#[test]
fn sample_moments_match_mixture() {
    // Sampling with the oracle from N(0, I) reproduces the mixture moments.
    use enm_core::{ddim_sample, GuidanceConfig, Latent};
    use rand_distr::StandardNormal;

    let gmm = GaussianMixture::new(
        2,
        vec![
            Component {
                weight: 0.3,
                mean: vec![-1.0, 0.5],
                sigma: 0.5,
                class: 0,
            },
            Component {
                weight: 0.7,
                mean: vec![1.0, -0.5],
                sigma: 0.4,
                class: 0,
            },
        ],
    )
    .unwrap();
    let schedule = NoiseSchedule::default_with_steps(50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 1000;
    let mut outs = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let (x, _) = ddim_sample(
            &gmm,
            &Latent::new(z, 50),
            Condition::Class(0),
            &GuidanceConfig::none(),
            &schedule,
        )
        .unwrap();
        outs.push(x.values);
    }
    let mean: Vec<f64> = (0..2)
        .map(|i| outs.iter().map(|o| o[i]).sum::<f64>() / n as f64)
        .collect();
    // E[x] = (0.4, -0.2); Var x0 = 0.3*0.25 + 0.7*0.16 + 0.84 = 1.027.
    let expected_mean = [0.4, -0.2];
    let expected_var = [1.027, 0.3 * 0.25 + 0.7 * 0.16 + 0.21];
    for i in 0..2 {
        let se = (expected_var[i] / n as f64).sqrt();
        assert!((mean[i] - expected_mean[i]).abs() < 4.0 * se, "mean[{i}] = {}", mean[i]);
        let var = outs.iter().map(|o| (o[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(
            (var - expected_var[i]).abs() < 0.15 * expected_var[i],
            "var[{i}] = {var}"
        );
    }
}
