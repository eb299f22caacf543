use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbn::Adam;
use crate::rng::StreamKey;
use crate::statespace::LatentPanel;

use super::kernel::SqExpKernel;
use super::loglik::{log_posterior_gradient, MonteCarloOptions, DEFAULT_RESTART_GAP_STEPS};
use super::model::{InducingSet, NpsdeModel, NpsdeParams, DEFAULT_JITTER};

/// Upper bound on the size of the default inducing grid.
pub const MAX_DEFAULT_INDUCING: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NpsdeConfig {
    /// Grid points per dimension. `None` picks min(5, ⌊64^(1/d)⌋).
    pub inducing_per_dim: Option<usize>,
    pub samples: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// The learning rate decays linearly to this fraction of its initial value.
    pub final_learning_rate_fraction: f64,
    pub restart_gap_steps: usize,
    /// Fit the observation noise R. When false it stays at its initial value.
    pub fit_noise: bool,
    /// Initial R as a fraction of each state dimension's variance.
    pub initial_noise_fraction: f64,
    /// Initial R_ii for every dimension; overrides the fraction.
    pub initial_noise_variance: Option<f64>,
    /// The returned θ is the mean of this many final iterates.
    pub averaging_iterations: usize,
    pub jitter: f64,
}

impl Default for NpsdeConfig {
    fn default() -> Self {
        Self {
            inducing_per_dim: None,
            samples: 32,
            iterations: 300,
            learning_rate: 0.05,
            final_learning_rate_fraction: 0.1,
            restart_gap_steps: DEFAULT_RESTART_GAP_STEPS,
            fit_noise: true,
            initial_noise_fraction: 0.05,
            initial_noise_variance: None,
            averaging_iterations: 50,
            jitter: DEFAULT_JITTER,
        }
    }
}

impl NpsdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.iterations == 0 {
            return Err(Error::InvalidArgument("samples and iterations must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.initial_noise_fraction > 0.0) || !(self.final_learning_rate_fraction > 0.0) {
            return Err(Error::InvalidArgument("learning rate and noise fraction must be positive".into()));
        }
        if self.initial_noise_variance.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument("initial noise variance must be positive".into()));
        }
        if self.inducing_per_dim == Some(0) || self.inducing_per_dim == Some(1) {
            return Err(Error::InvalidArgument("at least two inducing points per dimension".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    /// Negative log posterior per iteration, before the update.
    pub objective: Vec<f64>,
    pub final_gradient_norm: f64,
    pub parameter_count: usize,
    pub transition_count: usize,
    pub warnings: Vec<String>,
}

fn default_per_dim(d: usize) -> usize {
    let mut n = 1;
    while (n + 1usize).pow(d as u32) <= MAX_DEFAULT_INDUCING {
        n += 1;
    }
    n.min(5)
}

/// Bounding box of all states, widened by 10% of its width on each side.
pub fn state_bounds(panel: &LatentPanel) -> Result<Vec<(f64, f64)>> {
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); panel.dim];
    for x in panel.units.iter().flat_map(|u| &u.states) {
        for (b, v) in bounds.iter_mut().zip(x.iter()) {
            b.0 = b.0.min(*v);
            b.1 = b.1.max(*v);
        }
    }
    bounds
        .into_iter()
        .map(|(lo, hi)| {
            if !(hi > lo) {
                return Err(Error::InsufficientData("states do not span a range in every dimension".into()));
            }
            let pad = 0.1 * (hi - lo);
            Ok((lo - pad, hi + pad))
        })
        .collect()
}

/// Regular grid over the padded bounding box, last dimension fastest.
pub fn inducing_grid(panel: &LatentPanel, per_dim: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let bounds = state_bounds(panel)?;
    let n = per_dim.unwrap_or_else(|| default_per_dim(panel.dim));
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|(lo, hi)| (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
        .collect();
    let mut grid = vec![Vec::new()];
    for axis in &axes {
        grid = grid.into_iter().flat_map(|p| axis.iter().map(move |v| [p.clone(), vec![*v]].concat())).collect();
    }
    Ok(grid)
}

/// Starting point: zero drift, constant amplitude matched to the mean
/// squared increment rate, lengthscales equal to the grid spacing.
pub fn initial_model(panel: &LatentPanel, config: &NpsdeConfig) -> Result<NpsdeModel> {
    config.validate()?;
    let d = panel.dim;
    let z = inducing_grid(panel, config.inducing_per_dim)?;
    let n = config.inducing_per_dim.unwrap_or_else(|| default_per_dim(d));
    let bounds = state_bounds(panel)?;
    let spacing: Vec<f64> = bounds.iter().map(|(lo, hi)| (hi - lo) / (n - 1) as f64).collect();

    let mut rate = (0.0, 0usize);
    let mut rate_all = (0.0, 0usize);
    for u in &panel.units {
        for tr in u.transitions() {
            let sq: f64 = tr.from.iter().zip(tr.to.iter()).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / d as f64;
            rate_all = (rate_all.0 + sq / tr.dt, rate_all.1 + 1);
            if !tr.spans_gap {
                rate = (rate.0 + sq / tr.dt, rate.1 + 1);
            }
        }
    }
    let (sum, count) = if rate.1 > 0 { rate } else { rate_all };
    if count == 0 {
        return Err(Error::InsufficientData("no transitions".into()));
    }
    let b0 = (sum / count as f64).sqrt();
    if !(b0 > 0.0) {
        return Err(Error::InsufficientData("states never change".into()));
    }

    let all: Vec<&[f64]> = panel.units.iter().flat_map(|u| u.states.iter().map(|s| &s[..])).collect();
    let noise_variance = (0..d)
        .map(|i| {
            let mean = all.iter().map(|x| x[i]).sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / all.len() as f64;
            config.initial_noise_variance.unwrap_or(config.initial_noise_fraction * var)
        })
        .collect();

    NpsdeModel::new(NpsdeParams {
        dim: d,
        drift_kernel: SqExpKernel::new(1.0, spacing.clone())?,
        amplitude_kernel: SqExpKernel::new(b0 * b0, spacing)?,
        inducing: InducingSet {
            drift_values: vec![vec![0.0; d]; z.len()],
            amplitude_values: vec![b0; z.len()],
            locations: z,
        },
        noise_variance,
        jitter: config.jitter,
    })
}

/// MAP fit of the sparse-GP SDE by stochastic gradient ascent on the Monte
/// Carlo log posterior. Iteration i uses streams under `seed`/i.
pub fn fit_npsde(panel: &LatentPanel, config: &NpsdeConfig, seed: u64) -> Result<(NpsdeModel, FitLog)> {
    let mut model = initial_model(panel, config)?;
    let lay = model.layout();
    let mut log = FitLog {
        parameter_count: lay.len(),
        transition_count: panel.transition_count(),
        ..Default::default()
    };
    if log.parameter_count > log.transition_count {
        log.warnings.push(format!(
            "{} parameters exceed {} transitions; the posterior is prior-dominated",
            log.parameter_count, log.transition_count
        ));
    }
    let options = MonteCarloOptions { samples: config.samples, restart_gap_steps: config.restart_gap_steps };
    let root = StreamKey::new(seed, 0).child_named("npsde");
    let mut theta = model.theta();
    let mut adam = Adam::new(theta.len(), config.learning_rate);
    let averaging = config.averaging_iterations.min(config.iterations);
    let mut average = vec![0.0; theta.len()];

    for iter in 0..config.iterations {
        let (value, mut grad) = log_posterior_gradient(&model, panel, &options, root.child(iter as u64))?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch: iter, learning_rate: config.learning_rate });
        }
        log.objective.push(-value);
        if !config.fit_noise {
            (0..lay.dim).for_each(|i| grad[lay.noise(i)] = 0.0);
        }
        log.final_gradient_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        grad.iter_mut().for_each(|g| *g = -*g);
        let progress = iter as f64 / (config.iterations.max(2) - 1) as f64;
        adam.learning_rate = config.learning_rate * (1.0 - (1.0 - config.final_learning_rate_fraction) * progress);
        adam.step(&mut theta, &grad);
        model = model.with_theta(&theta)?;
        if iter + averaging >= config.iterations {
            average.iter_mut().zip(&theta).for_each(|(a, t)| *a += t / averaging as f64);
        }
    }
    if averaging > 0 {
        model = model.with_theta(&average)?;
    }
    Ok((model, log))
}
