use histodyn_core::diagnostics::{local_irreversibility, path_irreversibility};
use histodyn_core::impute::{bridge_resample, normalize_log_weights};
use histodyn_core::lbn::{forward_diffusion, DiffNet, Head, Mlp, Standardizer, SwagState};
use histodyn_core::likelihood::{transition_logdensity, TransitionDensityMethod};
use histodyn_core::linalg::{psd_sqrt, sym_eigendecompose};
use histodyn_core::npsde::{InducingSet, NpsdeModel, NpsdeParams, SqExpKernel, DEFAULT_JITTER};
use histodyn_core::statespace::{pca_fit, Observation, Panel, PcaConfig, UnitRecord};
use histodyn_core::{LinearSde, Matrix, PsdMatrix, RngStream, SdeModel, StateVector};
use proptest::prelude::*;

fn symmetric(d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, d * d).prop_map(move |v| {
        let m = Matrix::from_row_slice(d, d, &v);
        m.add(&m.transpose()).scaled(0.5)
    })
}

/// Gram matrix plus a floor, so the smallest eigenvalue is at least `floor`.
fn positive_definite(d: usize, floor: f64) -> impl Strategy<Value = PsdMatrix> {
    prop::collection::vec(-2.0f64..2.0, d * d).prop_map(move |v| {
        let a = Matrix::from_row_slice(d, d, &v);
        PsdMatrix::new(a.matmul(&a.transpose()).add(&Matrix::identity(d).scaled(floor))).unwrap()
    })
}

fn linear_model(d: usize) -> impl Strategy<Value = LinearSde> {
    (prop::collection::vec(-1.5f64..1.5, d * d), prop::collection::vec(-1.0f64..1.0, d), positive_definite(d, 0.1))
        .prop_map(move |(a, b, dm)| LinearSde::new(Matrix::from_row_slice(d, d, &a), b, dm).unwrap())
}

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d)
}

fn max_rel(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).max_abs() / b.max_abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn eigendecomposition_reconstructs_and_is_orthonormal(d in 1usize..6, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let raw: Vec<f64> = (0..d * d).map(|_| 4.0 * rng.normal()).collect();
        let m = Matrix::from_row_slice(d, d, &raw);
        let m = m.add(&m.transpose()).scaled(0.5);
        let e = sym_eigendecompose(&m).unwrap();
        let u = &e.vectors;
        let rebuilt = u.matmul(&Matrix::from_diag(&e.values)).matmul(&u.transpose());
        prop_assert!(rebuilt.sub(&m).max_abs() <= 1e-10 * m.max_abs().max(1.0));
        prop_assert!(u.transpose().matmul(u).sub(&Matrix::identity(d)).max_abs() < 1e-10);
        prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn psd_sqrt_squares_back(m in positive_definite(3, 1e-3)) {
        let r = psd_sqrt(&m).unwrap();
        prop_assert!(r.symmetry_gap().2 < 1e-12 * r.max_abs());
        prop_assert!(max_rel(&r.matmul(&r), m.as_matrix()) < 1e-9);
    }

    #[test]
    fn symmetric_inputs_decompose(m in symmetric(4)) {
        prop_assert!(sym_eigendecompose(&m).is_ok());
    }

    #[test]
    fn local_irreversibility_is_antisymmetric(
        model in linear_model(2),
        x in point(2),
        y in point(2),
        dt in 0.05f64..1.0,
        n_sub in 1usize..8,
    ) {
        for method in [TransitionDensityMethod::OneStepGaussian, TransitionDensityMethod::ComposedGaussian { n_sub }] {
            let fwd = local_irreversibility(&model, &x, &y, dt, &method).unwrap();
            let bwd = local_irreversibility(&model, &y, &x, dt, &method).unwrap();
            prop_assert_eq!(fwd, -bwd);
        }
    }

    #[test]
    fn reversing_a_path_negates_its_irreversibility(
        model in linear_model(2),
        states in prop::collection::vec(point(2), 2..8),
    ) {
        let path: Vec<StateVector> = states.into_iter().map(StateVector::new).collect();
        let times: Vec<f64> = (0..path.len()).map(|k| 0.3 * k as f64).collect();
        let method = TransitionDensityMethod::ComposedGaussian { n_sub: 3 };
        let (fwd, series) = path_irreversibility(&model, &path, &times, &method).unwrap();
        let mut rev = path.clone();
        rev.reverse();
        let (bwd, _) = path_irreversibility(&model, &rev, &times, &method).unwrap();
        prop_assert!((fwd + bwd).abs() <= 1e-9 * (1.0 + fwd.abs()));
        prop_assert!((fwd - series.iter().sum::<f64>()).abs() <= 1e-9 * (1.0 + fwd.abs()));
    }

    #[test]
    fn odd_drift_densities_are_sign_flip_invariant(
        theta in 0.2f64..2.0,
        diffusion in 0.1f64..1.0,
        x in point(2),
        y in point(2),
        dt in 0.05f64..1.0,
    ) {
        let ou = LinearSde::ornstein_uhlenbeck(2, theta, diffusion);
        let neg = |v: &[f64]| v.iter().map(|a| -a).collect::<Vec<_>>();
        for method in [TransitionDensityMethod::OneStepGaussian, TransitionDensityMethod::ComposedGaussian { n_sub: 5 }] {
            let a = transition_logdensity(&ou, &x, &y, dt, &method).unwrap();
            let b = transition_logdensity(&ou, &neg(&x), &neg(&y), dt, &method).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn normalized_weights_sum_to_one_with_bounded_ess(logw in prop::collection::vec(-800.0f64..50.0, 1..200)) {
        let (w, ess, max) = normalize_log_weights(&logw).unwrap();
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(ess >= 1.0 - 1e-12 && ess <= logw.len() as f64 * (1.0 + 1e-12));
        prop_assert_eq!(max, logw.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn resampling_preserves_count_and_support(
        values in prop::collection::vec(-10.0f64..10.0, 1..64),
        logw in prop::collection::vec(-5.0f64..5.0, 64),
        u in 0.0f64..1.0,
    ) {
        let candidates: Vec<StateVector> = values.iter().map(|&v| StateVector::new(vec![v])).collect();
        let (w, _, _) = normalize_log_weights(&logw[..candidates.len()]).unwrap();
        let out = bridge_resample(&candidates, &w, u).unwrap();
        prop_assert_eq!(out.len(), candidates.len());
        prop_assert!(out.iter().all(|x| candidates.contains(x)));
        let mut shuffled: Vec<(StateVector, f64)> = candidates.iter().cloned().zip(w.iter().copied()).collect();
        shuffled.reverse();
        let (c2, w2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert_eq!(bridge_resample(&c2, &w2, u).unwrap(), out);
    }

    #[test]
    fn diffusion_network_output_is_psd(seed in any::<u64>(), x in point(3), scale in 1e-3f64..10.0) {
        let mut rng = RngStream::new(seed, 0);
        let net = DiffNet {
            net: Mlp::new(Head::Diffusion.shape(3, &[8, 8]), &mut rng),
            input: Standardizer::identity(3),
            scale,
        };
        let d = forward_diffusion(&net, &x);
        prop_assert!(d.as_matrix().symmetry_gap().2 < 1e-12 * d.as_matrix().max_abs());
        let eig = sym_eigendecompose(d.as_matrix()).unwrap();
        prop_assert!(*eig.values.last().unwrap() >= 1e-9 * (1.0 - 1e-6));
    }

    #[test]
    fn swag_variance_is_nonnegative(snapshots in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..30)) {
        let mut state = SwagState::new(4);
        for s in &snapshots {
            state.collect(s);
        }
        prop_assert!(state.variance().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn npsde_interpolates_and_stays_isotropic(
        values in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.1f64..2.0), 9),
        x in point(2),
        lengthscale in 0.3f64..0.9,
    ) {
        let locations: Vec<Vec<f64>> = (0..9).map(|m| vec![(m / 3) as f64 - 1.0, (m % 3) as f64 - 1.0]).collect();
        let model = NpsdeModel::new(NpsdeParams {
            dim: 2,
            drift_kernel: SqExpKernel::new(1.0, vec![lengthscale, lengthscale]).unwrap(),
            amplitude_kernel: SqExpKernel::new(1.0, vec![lengthscale, 1.3 * lengthscale]).unwrap(),
            inducing: InducingSet {
                locations: locations.clone(),
                drift_values: values.iter().map(|v| vec![v.0, v.1]).collect(),
                amplitude_values: values.iter().map(|v| v.2).collect(),
            },
            noise_variance: vec![0.1, 0.1],
            jitter: DEFAULT_JITTER,
        })
        .unwrap();
        for (z, v) in locations.iter().zip(&values) {
            let f = model.drift(z);
            prop_assert!((f[0] - v.0).abs() < 1e-3 && (f[1] - v.1).abs() < 1e-3);
            prop_assert!((model.amplitude(z) - v.2).abs() < 1e-3);
        }
        let d = model.diffusion(&x);
        prop_assert_eq!(d.get(0, 1), 0.0);
        prop_assert_eq!(d.get(1, 0), 0.0);
        prop_assert_eq!(d.get(0, 0), d.get(1, 1));
        prop_assert!(d.get(0, 0) >= 0.0);
    }

    #[test]
    fn pca_components_are_orthonormal_and_ratios_ordered(seed in any::<u64>(), p in 2usize..5, k in 1usize..5) {
        let k = k.min(p);
        let mut rng = RngStream::new(seed, 0);
        let mix: Vec<f64> = (0..p * p).map(|_| rng.normal()).collect();
        let units = (0..4)
            .map(|u| UnitRecord {
                unit_id: format!("u{u}"),
                observations: (0..15)
                    .map(|t| {
                        let z: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
                        let values = (0..p).map(|i| Some((0..p).map(|j| mix[i * p + j] * z[j]).sum::<f64>())).collect();
                        Observation { t_obs: t as f64, values }
                    })
                    .collect(),
            })
            .collect();
        let panel = Panel { columns: (0..p).map(|i| format!("c{i}")).collect(), units };
        let model = pca_fit(&panel, &PcaConfig { components: k, ..Default::default() }).unwrap();
        let c = &model.components;
        prop_assert!(c.matmul(&c.transpose()).sub(&Matrix::identity(k)).max_abs() < 1e-10);
        let r = &model.explained_variance_ratio;
        prop_assert!(r.windows(2).all(|w| w[0] >= w[1]));
        let total: f64 = r.iter().sum();
        prop_assert!(total <= 1.0 + 1e-10);
        if k == p {
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
        for (comp, &anchor) in model.sign_anchor.iter().enumerate() {
            prop_assert!(c[(comp, anchor)] >= 0.0);
        }
    }

    #[test]
    fn equal_stream_keys_reproduce(seed in any::<u64>(), id in any::<u64>()) {
        let mut a = RngStream::new(seed, id);
        let mut b = RngStream::new(seed, id);
        for _ in 0..64 {
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }
}
