//! Monte-Carlo checks of simulation, densities, diagnostics and imputation
//! against closed-form results for linear SDEs.

use histodyn_core::diagnostics::{local_irreversibility, surprisal};
use histodyn_core::impute::{impute_gap, ImputeConfig};
use histodyn_core::likelihood::{transition_logdensity, TransitionDensityMethod};
use histodyn_core::simulate::{em_step, simulate_ensemble};
use histodyn_core::{LinearSde, Matrix, PsdMatrix, RngStream, StreamKey, TimeRescaling};

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Exact Gaussian law of x_t for dx = −θx dt + √(2D) dW started at `x0`.
fn ou_moments(x0: f64, t: f64, theta: f64, d: f64) -> (f64, f64) {
    let e = (-theta * t).exp();
    (x0 * e, d / theta * (1.0 - e * e))
}

#[test]
fn euler_maruyama_bias_halves_with_the_step() {
    let ou = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
    let exact = 2.0 * (-1.0f64).exp();
    let bias = |dt: f64| {
        let r = TimeRescaling::with_substep(1.0, dt).unwrap();
        let ens = simulate_ensemble(&ou, &[2.0], &[0.0, 1.0], 400_000, &r, StreamKey::new(1, 0)).unwrap();
        ens.mean(1)[0] - exact
    };
    let (coarse, fine) = (bias(0.1), bias(0.05));
    assert!(coarse < 0.0 && fine < 0.0, "{coarse} {fine}");
    let ratio = coarse / fine;
    assert!((1.6..2.5).contains(&ratio), "bias ratio {ratio} ({coarse} vs {fine})");
}

#[test]
fn ou_bridge_matches_the_exact_conditional() {
    let (theta, d) = (1.0, 0.5);
    let ou = LinearSde::ornstein_uhlenbeck(1, theta, d);
    let (x0, xt, big_t) = (1.0, -0.5, 1.0);
    let config = ImputeConfig { samples: 20_000, rescaling: TimeRescaling::with_substep(1.0, 0.005).unwrap(), ..Default::default() };
    let queries = [0.3, 0.7];
    let out = impute_gap(&ou, &[x0], 0.0, &[xt], big_t, &queries, &config, StreamKey::new(2, 0)).unwrap();
    for (b, &t) in out.iter().zip(&queries) {
        let (m, v) = ou_moments(x0, t, theta, d);
        let a = (-theta * (big_t - t)).exp();
        let (_, w) = ou_moments(0.0, big_t - t, theta, d);
        let precision = 1.0 / v + a * a / w;
        let mean = (m / v + a * xt / w) / precision;
        let var = 1.0 / precision;
        let got_var = b.std()[0].powi(2);
        let se = (got_var / b.effective_sample_size).sqrt();
        assert!((b.mean()[0] - mean).abs() < 3.0 * se, "t={t}: mean {} vs {mean} (SE {se})", b.mean()[0]);
        assert!((got_var / var - 1.0).abs() < 0.05, "t={t}: variance {got_var} vs {var}");
    }
}

#[test]
fn bridge_mean_approaches_the_endpoint() {
    let model = LinearSde::brownian(1, 0.5);
    let config = ImputeConfig { samples: 5000, rescaling: TimeRescaling::with_substep(1.0, 0.01).unwrap(), ..Default::default() };
    let queries = [0.2, 0.4, 0.6, 0.8, 0.95];
    let out = impute_gap(&model, &[0.0], 0.0, &[2.0], 1.0, &queries, &config, StreamKey::new(3, 0)).unwrap();
    let dist: Vec<f64> = out.iter().map(|b| (b.mean()[0] - 2.0).abs()).collect();
    assert!(dist.windows(2).all(|w| w[1] < w[0]), "{dist:?}");
}

#[test]
fn simulated_kde_approaches_composed_gaussian_for_linear_models() {
    let ou = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
    let kde = TransitionDensityMethod::SimulatedKde { samples: 100_000, n_sub: 20, seed: 4 };
    let gauss = TransitionDensityMethod::ComposedGaussian { n_sub: 20 };
    for to in [-0.5, 0.0, 0.3, 0.8, 1.2] {
        let a = transition_logdensity(&ou, &[0.5], &[to], 0.5, &kde).unwrap();
        let b = transition_logdensity(&ou, &[0.5], &[to], 0.5, &gauss).unwrap();
        assert!((a - b).abs() < 0.05, "x_to={to}: kde {a} vs gaussian {b}");
    }
}

#[test]
fn transition_densities_integrate_to_one() {
    let ou = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
    let methods = [
        TransitionDensityMethod::OneStepGaussian,
        TransitionDensityMethod::ComposedGaussian { n_sub: 10 },
        TransitionDensityMethod::SimulatedKde { samples: 2000, n_sub: 10, seed: 5 },
    ];
    for method in methods {
        let h = 0.005;
        let total: f64 = (0..2000)
            .map(|k| -5.0 + h * k as f64)
            .map(|to| transition_logdensity(&ou, &[0.7], &[to], 0.8, &method).unwrap().exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 0.01, "{}: {total}", method.name());
    }
}

#[test]
fn forward_paths_produce_irreversibility_on_average() {
    let a = Matrix::from_rows(&[vec![-1.0, 1.5], vec![-1.5, -1.0]]);
    let model = LinearSde::new(a, vec![0.0, 0.0], PsdMatrix::scalar_identity(2, 0.5)).unwrap();
    let mut rng = RngStream::new(6, 0);
    let dt = 0.1;
    let mut x = vec![0.0, 0.0];
    let mut sigmas = Vec::new();
    for _ in 0..5000 {
        let next = em_step(&model, &x, dt, &[rng.normal(), rng.normal()]).unwrap().into_inner();
        sigmas.push(local_irreversibility(&model, &x, &next, dt, &TransitionDensityMethod::OneStepGaussian).unwrap());
        x = next;
    }
    let (m, sd) = mean_sd(&sigmas);
    assert!(m > -3.0 * sd / (sigmas.len() as f64).sqrt(), "mean σ {m}");
    assert!(m > 0.0);
}

#[test]
fn mean_surprisal_is_the_gaussian_entropy() {
    let ou = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
    let mut rng = RngStream::new(7, 0);
    let dt = 0.3;
    let values: Vec<f64> = (0..4000)
        .map(|_| {
            let x = 2.0 * rng.normal();
            let y = em_step(&ou, &[x], dt, &[rng.normal()]).unwrap();
            surprisal(&ou, &[x], &y, dt, &TransitionDensityMethod::OneStepGaussian).unwrap()
        })
        .collect();
    let (m, sd) = mean_sd(&values);
    let entropy = 0.5 * (4.0 * std::f64::consts::PI * 0.5 * dt).ln() + 0.5;
    assert!((m - entropy).abs() < 3.0 * sd / (values.len() as f64).sqrt(), "{m} vs {entropy}");
}

#[test]
fn ensemble_statistics_do_not_depend_on_thread_count() {
    let ou = LinearSde::ornstein_uhlenbeck(2, 0.7, 0.3);
    let r = TimeRescaling::with_substep(1.0, 0.1).unwrap();
    let times = [0.0, 0.5, 1.5];
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_ensemble(&ou, &[1.0, -1.0], &times, 300, &r, StreamKey::new(8, 0)).unwrap().paths)
    };
    assert_eq!(run(1), run(3));
}
