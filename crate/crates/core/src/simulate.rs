//! Euler–Maruyama integration of an [`SdeModel`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;
use crate::model::{evaluate, SdeModel};
use crate::rng::{RngStream, StreamKey};
use crate::types::{StateVector, TimeRescaling};

/// One Euler–Maruyama step: x + F(x) dt + √(2 D(x)) √dt ξ with ξ standard normal.
pub fn em_step<M: SdeModel + ?Sized>(model: &M, x: &[f64], dt: f64, noise: &[f64]) -> Result<StateVector> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    if noise.len() != model.dim() || x.len() != model.dim() {
        return Err(Error::Shape(format!("state/noise dimension does not match model dimension {}", model.dim())));
    }
    let (f, d) = evaluate(model, x)?;
    let root = psd_sqrt(&d.scaled(2.0))?;
    let sdt = dt.sqrt();
    let scaled: Vec<f64> = noise.iter().map(|z| z * sdt).collect();
    let kick = root.mul_vec(&scaled);
    let next: Vec<f64> = (0..x.len()).map(|i| x[i] + f[i] * dt + kick[i]).collect();
    let next = StateVector::new(next);
    if !next.is_finite() {
        return Err(Error::ModelEvaluation { x: x.to_vec() });
    }
    Ok(next)
}

/// Integrates over `interval` using `rescaling.steps_for(interval)` equal sub-steps.
pub fn advance<M: SdeModel + ?Sized>(
    model: &M,
    x: &[f64],
    interval: f64,
    rescaling: &TimeRescaling,
    rng: &mut RngStream,
) -> Result<StateVector> {
    let steps = rescaling.steps_for(interval);
    advance_steps(model, x, interval, steps, rng)
}

pub(crate) fn advance_steps<M: SdeModel + ?Sized>(
    model: &M,
    x: &[f64],
    interval: f64,
    steps: usize,
    rng: &mut RngStream,
) -> Result<StateVector> {
    let h = interval / steps as f64;
    let mut state = StateVector::from(x);
    let mut noise = vec![0.0; model.dim()];
    for step in 0..steps {
        rng.fill_normal(&mut noise);
        state = em_step(model, &state, h, &noise)
            .map_err(|e| Error::SimulationStep { step, source: Box::new(e) })?;
    }
    Ok(state)
}

/// A single simulated trajectory recorded on an observation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPath {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
}

/// Simulates from `x0` over `horizon` simulation time. States are recorded every
/// unit observation interval (`rescaling.alpha`) and at the horizon itself.
pub fn simulate_path<M: SdeModel + ?Sized>(
    model: &M,
    x0: &[f64],
    horizon: f64,
    rescaling: &TimeRescaling,
    rng: &mut RngStream,
) -> Result<SimulatedPath> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let grid = observation_grid(horizon, rescaling.unit_interval());
    simulate_on_times(model, x0, &grid, rescaling, rng)
}

/// Simulates from `x0` at `times[0]` and records the state at every entry of `times`.
pub fn simulate_on_times<M: SdeModel + ?Sized>(
    model: &M,
    x0: &[f64],
    times: &[f64],
    rescaling: &TimeRescaling,
    rng: &mut RngStream,
) -> Result<SimulatedPath> {
    check_times(times)?;
    let mut states = Vec::with_capacity(times.len());
    states.push(StateVector::from(x0));
    for w in times.windows(2) {
        let prev = states.last().expect("non-empty");
        let next = advance(model, prev, w[1] - w[0], rescaling, rng)?;
        states.push(next);
    }
    Ok(SimulatedPath { times: times.to_vec(), states })
}

fn observation_grid(horizon: f64, unit: f64) -> Vec<f64> {
    let n = (horizon / unit + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| k as f64 * unit).collect();
    if horizon - grid[n] > 1e-9 * unit {
        grid.push(horizon);
    }
    grid
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("time grid is empty".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// `S` independent paths from a common start, recorded on a shared time grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub start: StateVector,
    pub times: Vec<f64>,
    /// `paths[s][k]` is path `s` at `times[k]`.
    pub paths: Vec<Vec<StateVector>>,
    /// Path `s` was drawn from `seed.child(s)`.
    pub seed: StreamKey,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Per-dimension ensemble mean at time index `k`.
    pub fn mean(&self, k: usize) -> Vec<f64> {
        let d = self.start.dim();
        let mut m = vec![0.0; d];
        for p in &self.paths {
            for (acc, v) in m.iter_mut().zip(p[k].iter()) {
                *acc += v;
            }
        }
        let s = self.paths.len() as f64;
        m.iter_mut().for_each(|v| *v /= s);
        m
    }

    /// Per-dimension unbiased ensemble variance at time index `k`.
    pub fn variance(&self, k: usize) -> Vec<f64> {
        let m = self.mean(k);
        let mut v = vec![0.0; m.len()];
        for p in &self.paths {
            for i in 0..m.len() {
                v[i] += (p[k][i] - m[i]).powi(2);
            }
        }
        let denom = (self.paths.len().max(2) - 1) as f64;
        v.iter_mut().for_each(|x| *x /= denom);
        v
    }

    /// Standard error of the per-dimension mean at time index `k`.
    pub fn standard_error(&self, k: usize) -> Vec<f64> {
        let n = self.paths.len() as f64;
        self.variance(k).into_iter().map(|v| (v / n).sqrt()).collect()
    }

    /// States of every path at time index `k`.
    pub fn slice(&self, k: usize) -> Vec<StateVector> {
        self.paths.iter().map(|p| p[k].clone()).collect()
    }
}

/// Simulates `samples` paths in parallel. Path `s` uses the stream `seed.child(s)`,
/// so results do not depend on how work is scheduled.
pub fn simulate_ensemble<M: SdeModel + ?Sized>(
    model: &M,
    x0: &[f64],
    times: &[f64],
    samples: usize,
    rescaling: &TimeRescaling,
    seed: StreamKey,
) -> Result<PathEnsemble> {
    if samples == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one path".into()));
    }
    check_times(times)?;
    let paths = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = seed.child(s as u64).stream();
            simulate_on_times(model, x0, times, rescaling, &mut rng).map(|p| p.states)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble { start: StateVector::from(x0), times: times.to_vec(), paths, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::PsdMatrix;
    use crate::model::LinearSde;

    #[test]
    fn null_dynamics_leave_state_nearly_unchanged() {
        let m = LinearSde::brownian(1, 0.0);
        let dt = 0.25;
        let x = em_step(&m, &[1.3], dt, &[1.0]).unwrap();
        // √(2·ε) floor on the diffusion root
        assert!((x[0] - 1.3).abs() <= 1e-4 * dt.sqrt());
    }

    #[test]
    fn deterministic_drift_step() {
        let m = LinearSde::constant_drift(vec![1.0], 0.0);
        let x = em_step(&m, &[2.0], 0.5, &[0.7]).unwrap();
        assert!((x[0] - 2.5).abs() < 1e-4);
    }

    #[test]
    fn step_variance_is_two_d_dt() {
        let m = LinearSde::brownian(1, 0.5);
        let dt = 0.3;
        let mut rng = RngStream::new(11, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| em_step(&m, &[0.0], dt, &[rng.normal()]).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / dt - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn non_finite_model_output_is_reported() {
        struct Bad;
        impl SdeModel for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn drift(&self, _x: &[f64]) -> StateVector {
                StateVector::new(vec![f64::NAN])
            }
            fn diffusion(&self, _x: &[f64]) -> PsdMatrix {
                PsdMatrix::scalar_identity(1, 1.0)
            }
        }
        let err = em_step(&Bad, &[0.4], 0.1, &[0.0]).unwrap_err();
        assert!(matches!(err, Error::ModelEvaluation { ref x } if x == &vec![0.4]));
        let err = simulate_path(&Bad, &[0.4], 1.0, &TimeRescaling::identity(), &mut RngStream::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::SimulationStep { step: 0, .. }));
    }

    #[test]
    fn single_step_path_matches_em_step() {
        let m = LinearSde::ornstein_uhlenbeck(2, 1.0, 0.5);
        let r = TimeRescaling::new(0.1, 1).unwrap();
        let path = simulate_path(&m, &[1.0, -1.0], 0.1, &r, &mut RngStream::new(4, 2)).unwrap();
        let mut rng = RngStream::new(4, 2);
        let noise = rng.normals(2);
        let direct = em_step(&m, &[1.0, -1.0], 0.1, &noise).unwrap();
        assert_eq!(path.states.len(), 2);
        assert_eq!(path.states[1], direct);
    }

    #[test]
    fn fixed_seed_repeats_bitwise() {
        let m = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
        let r = TimeRescaling::new(1.0, 10).unwrap();
        let a = simulate_path(&m, &[0.0], 20.0, &r, &mut RngStream::new(9, 9)).unwrap();
        let b = simulate_path(&m, &[0.0], 20.0, &r, &mut RngStream::new(9, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times.len(), 21);
    }

    #[test]
    fn ou_stationary_variance() {
        // Var = D/θ = 0.5 for θ = 1, D = 0.5.
        let m = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
        let r = TimeRescaling::new(1.0, 100).unwrap();
        let path = simulate_path(&m, &[0.0], 20_000.0, &r, &mut RngStream::new(21, 0)).unwrap();
        let xs: Vec<f64> = path.states[100..].iter().map(|s| s[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var - 0.5).abs() < 0.025, "stationary variance {var}");
    }

    #[test]
    fn ensemble_mean_matches_ou_decay() {
        let m = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
        let r = TimeRescaling::new(1.0, 100).unwrap();
        let ens = simulate_ensemble(&m, &[2.0], &[0.0, 1.0], 10_000, &r, StreamKey::new(5, 0)).unwrap();
        let mean = ens.mean(1)[0];
        let se = ens.standard_error(1)[0];
        // Euler bias at δt = 0.01 is ~0.002, well inside 3 SE ≈ 0.02.
        assert!((mean - 2.0 * (-1.0_f64).exp()).abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(ens.paths.iter().all(|p| p[0][0] == 2.0));
    }

    #[test]
    fn driftless_ensemble_is_a_martingale() {
        let m = LinearSde::brownian(2, 0.3);
        let r = TimeRescaling::new(1.0, 4).unwrap();
        let ens = simulate_ensemble(&m, &[0.5, -0.5], &[0.0, 2.0], 10_000, &r, StreamKey::new(6, 1)).unwrap();
        let mean = ens.mean(1);
        let se = ens.standard_error(1);
        assert!((mean[0] - 0.5).abs() < 3.0 * se[0]);
        assert!((mean[1] + 0.5).abs() < 3.0 * se[1]);
    }

    #[test]
    fn single_path_ensemble_wraps_simulate() {
        let m = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
        let r = TimeRescaling::new(1.0, 5).unwrap();
        let key = StreamKey::new(8, 3);
        let ens = simulate_ensemble(&m, &[1.0], &[0.0, 1.0, 2.0], 1, &r, key).unwrap();
        let single = simulate_on_times(&m, &[1.0], &[0.0, 1.0, 2.0], &r, &mut key.child(0).stream()).unwrap();
        assert_eq!(ens.paths[0], single.states);
    }
}
