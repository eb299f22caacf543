//! Transition log-densities and path log-probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::{Matrix, PsdMatrix};
use crate::model::{evaluate, SdeModel};
use crate::rng::StreamKey;
use crate::simulate::advance_steps;
use crate::types::StateVector;

/// How P(x_to | x_from) over an interval is approximated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionDensityMethod {
    /// N(x_from + F dt, 2 D dt) from a single Euler–Maruyama step.
    OneStepGaussian,
    /// Mean and covariance propagated through `n_sub` linearised sub-steps.
    ComposedGaussian { n_sub: usize },
    /// Product-Gaussian kernel density over `samples` simulated endpoints,
    /// each integrated with `n_sub` sub-steps, Silverman bandwidth per dimension.
    SimulatedKde { samples: usize, n_sub: usize, seed: u64 },
}

impl TransitionDensityMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::OneStepGaussian => Ok(()),
            Self::ComposedGaussian { n_sub } if n_sub >= 1 => Ok(()),
            Self::ComposedGaussian { .. } => Err(Error::InvalidArgument("composed_gaussian needs n_sub >= 1".into())),
            Self::SimulatedKde { samples, n_sub, .. } if samples >= 100 && n_sub >= 1 => Ok(()),
            Self::SimulatedKde { .. } => Err(Error::InvalidArgument("simulated_kde needs samples >= 100 and n_sub >= 1".into())),
        }
    }

    /// Euler–Maruyama sub-steps used when simulating successors consistent with this method.
    pub fn simulation_steps(&self) -> usize {
        match *self {
            Self::OneStepGaussian => 1,
            Self::ComposedGaussian { n_sub } | Self::SimulatedKde { n_sub, .. } => n_sub,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::OneStepGaussian => "one_step_gaussian",
            Self::ComposedGaussian { .. } => "composed_gaussian",
            Self::SimulatedKde { .. } => "simulated_kde",
        }
    }
}

impl Default for TransitionDensityMethod {
    fn default() -> Self {
        Self::ComposedGaussian { n_sub: 1 }
    }
}

/// A transition density from a fixed starting state, ready for repeated evaluation.
#[derive(Clone, Debug)]
pub enum PreparedTransition {
    Gaussian(Gaussian),
    Kde(KernelDensity),
}

impl PreparedTransition {
    pub fn logpdf(&self, x_to: &[f64]) -> f64 {
        match self {
            Self::Gaussian(g) => g.logpdf(x_to),
            Self::Kde(k) => k.logpdf(x_to),
        }
    }

    /// Differential entropy when available in closed form.
    pub fn entropy(&self) -> Option<f64> {
        match self {
            Self::Gaussian(g) => Some(g.entropy()),
            Self::Kde(_) => None,
        }
    }
}

/// Product-Gaussian kernel density estimate.
#[derive(Clone, Debug)]
pub struct KernelDensity {
    points: Vec<StateVector>,
    bandwidths: Vec<f64>,
    log_norm: f64,
}

impl KernelDensity {
    /// Silverman's rule, h_j = σ_j (4 / ((d + 2) n))^{1/(d+4)}.
    pub fn silverman(points: Vec<StateVector>) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::DegenerateKde("need at least two points".into()));
        }
        let d = points[0].dim();
        let factor = (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
        let mut bandwidths = Vec::with_capacity(d);
        for j in 0..d {
            let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
            let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let h = var.sqrt() * factor;
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::DegenerateKde(format!("zero spread in dimension {j}")));
            }
            bandwidths.push(h);
        }
        let log_norm = -(n as f64).ln()
            - bandwidths.iter().map(|h| 0.5 * (2.0 * std::f64::consts::PI * h * h).ln()).sum::<f64>();
        Ok(Self { points, bandwidths, log_norm })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let exps: Vec<f64> = self
            .points
            .iter()
            .map(|p| {
                -0.5 * p
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidths)
                    .map(|((pi, xi), h)| ((xi - pi) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        self.log_norm + log_sum_exp(&exps)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Builds the transition density from `x_from` over `dt`.
pub fn prepare_transition<M: SdeModel + ?Sized>(
    model: &M,
    x_from: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
) -> Result<PreparedTransition> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("interval must be positive, got {dt}")));
    }
    method.validate()?;
    match *method {
        TransitionDensityMethod::OneStepGaussian => {
            let (f, d) = evaluate(model, x_from)?;
            let mean: Vec<f64> = x_from.iter().zip(f.iter()).map(|(x, f)| x + f * dt).collect();
            Ok(PreparedTransition::Gaussian(Gaussian::new(&mean, &d.scaled(2.0 * dt))?))
        }
        TransitionDensityMethod::ComposedGaussian { n_sub } => {
            let (mean, cov) = composed_moments(model, x_from, dt, n_sub)?;
            Ok(PreparedTransition::Gaussian(Gaussian::new(&mean, &cov)?))
        }
        TransitionDensityMethod::SimulatedKde { samples, n_sub, seed } => {
            let key = StreamKey::new(seed, state_hash(x_from, dt));
            let endpoints = (0..samples)
                .map(|s| advance_steps(model, x_from, dt, n_sub, &mut key.child(s as u64).stream()))
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedTransition::Kde(KernelDensity::silverman(endpoints)?))
        }
    }
}

/// Mean and covariance after `n_sub` Euler–Maruyama sub-steps, with the
/// covariance carried through the drift Jacobian: C ← (I + J h) C (I + J h)ᵀ + 2 D(m) h.
pub fn composed_moments<M: SdeModel + ?Sized>(
    model: &M,
    x_from: &[f64],
    dt: f64,
    n_sub: usize,
) -> Result<(Vec<f64>, PsdMatrix)> {
    let d = model.dim();
    let h = dt / n_sub as f64;
    let mut mean = x_from.to_vec();
    let mut cov = Matrix::zeros(d, d);
    for _ in 0..n_sub {
        let (f, diff) = evaluate(model, &mean)?;
        let jac = model.drift_jacobian(&mean);
        let prop = Matrix::identity(d).add(&jac.scaled(h));
        cov = prop.matmul(&cov).matmul(&prop.transpose()).add(&diff.as_matrix().scaled(2.0 * h));
        for (m, fi) in mean.iter_mut().zip(f.iter()) {
            *m += fi * h;
        }
    }
    if !cov.is_finite() {
        return Err(Error::ModelEvaluation { x: x_from.to_vec() });
    }
    Ok((mean, PsdMatrix::from_trusted(cov)))
}

fn state_hash(x: &[f64], dt: f64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x.iter().chain(std::iter::once(&dt)) {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// log P(x_to | x_from) over `dt`.
pub fn transition_logdensity<M: SdeModel + ?Sized>(
    model: &M,
    x_from: &[f64],
    x_to: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
) -> Result<f64> {
    if x_to.len() != model.dim() || x_from.len() != model.dim() {
        return Err(Error::Shape(format!("states must have dimension {}", model.dim())));
    }
    Ok(prepare_transition(model, x_from, dt, method)?.logpdf(x_to))
}

/// Σ_k log P(x_{k+1} | x_k); the initial-state density is not included.
pub fn path_logprob<M: SdeModel + ?Sized>(
    model: &M,
    trajectory: &[StateVector],
    times: &[f64],
    method: &TransitionDensityMethod,
) -> Result<f64> {
    if trajectory.len() < 2 || trajectory.len() != times.len() {
        return Err(Error::InvalidArgument("path needs at least two states with matching times".into()));
    }
    let mut total = 0.0;
    for (k, (xs, ts)) in trajectory.windows(2).zip(times.windows(2)).enumerate() {
        total += transition_logdensity(model, &xs[0], &xs[1], ts[1] - ts[0], method)
            .map_err(|e| Error::Segment { segment: k, source: Box::new(e) })?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::normal_logpdf;
    use crate::model::LinearSde;

    #[test]
    fn unit_variance_transition_at_start() {
        let m = LinearSde::brownian(1, 0.5);
        let v = transition_logdensity(&m, &[0.3], &[0.3], 1.0, &TransitionDensityMethod::OneStepGaussian).unwrap();
        assert!((v - (-0.918_938_53)).abs() < 1e-8);
    }

    #[test]
    fn mode_is_at_drift_displacement() {
        let m = LinearSde::constant_drift(vec![0.7], 0.2);
        let method = TransitionDensityMethod::OneStepGaussian;
        let at = transition_logdensity(&m, &[1.0], &[1.0 + 0.7 * 0.5], 0.5, &method).unwrap();
        for dx in [-0.2, -0.01, 0.01, 0.2] {
            let off = transition_logdensity(&m, &[1.0], &[1.35 + dx], 0.5, &method).unwrap();
            assert!(off < at);
        }
    }

    #[test]
    fn composed_gaussian_tracks_exact_ou_transition() {
        // Exact: mean x e^{-θ dt}, var (D/θ)(1 - e^{-2θ dt}).
        let m = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
        let method = TransitionDensityMethod::ComposedGaussian { n_sub: 100 };
        let x0 = 1.2;
        let mean = x0 * (-1.0_f64).exp();
        let var = 0.5 * (1.0 - (-2.0_f64).exp());
        for x1 in [-1.0, 0.0, 0.44, 1.0, 1.5] {
            let approx = transition_logdensity(&m, &[x0], &[x1], 1.0, &method).unwrap();
            let exact = normal_logpdf(x1, mean, var);
            assert!((approx - exact).abs() < 0.02, "x1 = {x1}: {approx} vs {exact}");
        }
    }

    #[test]
    fn two_point_path_equals_single_transition() {
        let m = LinearSde::ornstein_uhlenbeck(1, 0.5, 0.3);
        let method = TransitionDensityMethod::ComposedGaussian { n_sub: 4 };
        let traj = vec![StateVector::new(vec![0.2]), StateVector::new(vec![0.5])];
        let p = path_logprob(&m, &traj, &[0.0, 0.7], &method).unwrap();
        let t = transition_logdensity(&m, &[0.2], &[0.5], 0.7, &method).unwrap();
        assert_eq!(p, t);
    }

    #[test]
    fn constant_drift_path_at_mode() {
        let (f, d, dt, l) = (0.4, 0.3, 0.25, 6);
        let m = LinearSde::constant_drift(vec![f], d);
        let times: Vec<f64> = (0..=l).map(|k| k as f64 * dt).collect();
        let traj: Vec<StateVector> = times.iter().map(|t| StateVector::new(vec![f * t])).collect();
        let got = path_logprob(&m, &traj, &times, &TransitionDensityMethod::OneStepGaussian).unwrap();
        let per_step = -0.5 * (2.0 * std::f64::consts::PI * 2.0 * d * dt).ln();
        assert!((got - l as f64 * per_step).abs() < 1e-10);
    }

    #[test]
    fn short_path_is_rejected() {
        let m = LinearSde::brownian(1, 1.0);
        let err = path_logprob(&m, &[StateVector::new(vec![0.0])], &[0.0], &TransitionDensityMethod::OneStepGaussian);
        assert!(err.is_err());
    }

    #[test]
    fn identical_endpoints_make_a_degenerate_kde() {
        let pts = vec![StateVector::new(vec![1.0]); 10];
        assert!(matches!(KernelDensity::silverman(pts), Err(Error::DegenerateKde(_))));
    }

    #[test]
    fn kde_method_validation() {
        let bad = TransitionDensityMethod::SimulatedKde { samples: 50, n_sub: 1, seed: 0 };
        assert!(bad.validate().is_err());
        assert!(TransitionDensityMethod::ComposedGaussian { n_sub: 0 }.validate().is_err());
    }
}
