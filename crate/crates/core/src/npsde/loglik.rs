use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::log_sum_exp;
use crate::linalg::Matrix;
use crate::rng::{RngStream, StreamKey};
use crate::statespace::{LatentPanel, LatentUnit};

use super::model::{gp_interp_drift, LocalDerivatives, NpsdeModel};

/// Paths restart from the previous observation when an interval exceeds
/// this many substeps.
pub const DEFAULT_RESTART_GAP_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarloOptions {
    pub samples: usize,
    pub restart_gap_steps: usize,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self { samples: 64, restart_gap_steps: DEFAULT_RESTART_GAP_STEPS }
    }
}

/// One Euler–Maruyama step of the state together with its parameter
/// sensitivity S = ∂x/∂θ (d × P), driven by the standard normal `noise`.
///
/// x' = x + F h + b ξ √h and
/// S' = S + (J_F S + ∂F/∂θ) h + √h ξ (∇bᵀ S + ∂b/∂θ).
pub fn sensitivity_step(
    model: &NpsdeModel,
    x: &[f64],
    sensitivity: &Matrix,
    h: f64,
    noise: &[f64],
) -> Result<(Vec<f64>, Matrix)> {
    let lay = model.layout();
    if x.len() != lay.dim || noise.len() != lay.dim || sensitivity.rows() != lay.dim || sensitivity.cols() != lay.len() {
        return Err(Error::Shape("sensitivity step inputs disagree with the model layout".into()));
    }
    let mut work = StepWork::new(model);
    let mut next = x.to_vec();
    let mut sens = sensitivity.clone();
    step_in_place(model, &mut next, Some(&mut sens), h, noise, &mut work)?;
    Ok((next, sens))
}

struct StepWork {
    local: LocalDerivatives,
    grad_b_s: Vec<f64>,
    column: Vec<f64>,
}

impl StepWork {
    fn new(model: &NpsdeModel) -> Self {
        let lay = model.layout();
        Self { local: LocalDerivatives::new(lay), grad_b_s: vec![0.0; lay.len()], column: vec![0.0; lay.dim] }
    }
}

fn step_in_place(
    model: &NpsdeModel,
    x: &mut [f64],
    sensitivity: Option<&mut Matrix>,
    h: f64,
    noise: &[f64],
    work: &mut StepWork,
) -> Result<()> {
    let d = x.len();
    let sqrt_h = h.sqrt();
    let Some(sens) = sensitivity else {
        let f = gp_interp_drift(model, x);
        let b = model.amplitude(x);
        for i in 0..d {
            x[i] += f[i] * h + b * noise[i] * sqrt_h;
        }
        return check_finite(x);
    };
    let loc = &mut work.local;
    model.local_into(x, loc);
    let p = sens.cols();
    work.grad_b_s.copy_from_slice(&loc.amplitude_theta);
    for j in 0..d {
        let gj = loc.amplitude_grad[j];
        for (g, s) in work.grad_b_s.iter_mut().zip(sens.row(j)) {
            *g += gj * s;
        }
    }
    for q in 0..p {
        for i in 0..d {
            work.column[i] = (0..d).map(|j| loc.drift_jacobian[(i, j)] * sens[(j, q)]).sum();
        }
        for i in 0..d {
            sens[(i, q)] += (work.column[i] + loc.drift_theta[(i, q)]) * h + sqrt_h * noise[i] * work.grad_b_s[q];
        }
    }
    for i in 0..d {
        x[i] += loc.drift[i] * h + loc.amplitude * noise[i] * sqrt_h;
    }
    check_finite(x)
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::ModelEvaluation { x: x.to_vec() })
    }
}

fn log_gaussian_diag(resid: &[f64], var: &[f64]) -> f64 {
    resid
        .iter()
        .zip(var)
        .map(|(r, v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v))
        .sum()
}

/// Monte Carlo marginal log-likelihood of one unit and, optionally, its
/// gradient with respect to θ.
pub fn unit_loglik(
    model: &NpsdeModel,
    unit: &LatentUnit,
    substep: f64,
    options: &MonteCarloOptions,
    key: StreamKey,
    with_gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let lay = model.layout();
    let p = lay.len();
    let d = lay.dim;
    let s_count = options.samples;
    if s_count == 0 {
        return Err(Error::InvalidArgument("samples must be positive".into()));
    }
    let noise_var = &model.params().noise_variance;
    let mut streams: Vec<RngStream> = (0..s_count as u64).map(|s| key.child(s).stream()).collect();
    let start = unit.states[0].to_vec();
    let mut states = vec![start.clone(); s_count];
    let zero = Matrix::zeros(d, p);
    let mut sens = if with_gradient { vec![zero.clone(); s_count] } else { Vec::new() };
    let mut total = 0.0;
    let mut grad = vec![0.0; if with_gradient { p } else { 0 }];
    let mut noise = vec![0.0; d];
    let mut work = StepWork::new(model);
    let restart_limit = options.restart_gap_steps as f64 * substep;

    for k in 1..unit.len() {
        let interval = unit.times[k] - unit.times[k - 1];
        if interval > restart_limit + 1e-12 {
            for s in 0..s_count {
                states[s].copy_from_slice(&unit.states[k - 1]);
                if with_gradient {
                    sens[s] = zero.clone();
                }
            }
        }
        let n = ((interval / substep) - 1e-9).ceil().max(1.0) as usize;
        let h = interval / n as f64;
        for s in 0..s_count {
            for step in 0..n {
                streams[s].fill_normal(&mut noise);
                step_in_place(model, &mut states[s], sens.get_mut(s), h, &noise, &mut work)
                    .map_err(|e| Error::SimulationStep { step, source: Box::new(e) })?;
            }
        }
        let y = &unit.states[k];
        let resid: Vec<Vec<f64>> = states.iter().map(|x| (0..d).map(|i| y[i] - x[i]).collect()).collect();
        let logs: Vec<f64> = resid.iter().map(|r| log_gaussian_diag(r, noise_var)).collect();
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            return Err(Error::DegenerateWeights { max_logweight: lse, ess: 0.0 });
        }
        total += lse - (s_count as f64).ln();
        if with_gradient {
            for s in 0..s_count {
                let w = (logs[s] - lse).exp();
                if w == 0.0 {
                    continue;
                }
                for i in 0..d {
                    let scaled = resid[s][i] / noise_var[i];
                    for q in 0..p {
                        grad[q] += w * scaled * sens[s][(i, q)];
                    }
                    grad[lay.noise(i)] += w * 0.5 * (resid[s][i] * scaled - 1.0);
                }
            }
        }
    }
    Ok((total, with_gradient.then_some(grad)))
}

fn panel_loglik(
    model: &NpsdeModel,
    panel: &LatentPanel,
    options: &MonteCarloOptions,
    key: StreamKey,
    with_gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if panel.dim != model.layout().dim {
        return Err(Error::Shape(format!("panel dimension {} vs model {}", panel.dim, model.layout().dim)));
    }
    let substep = panel.rescaling.substep();
    let parts: Vec<(f64, Option<Vec<f64>>)> = panel
        .units
        .par_iter()
        .map(|u| unit_loglik(model, u, substep, options, key.child_named(&u.unit_id), with_gradient))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = with_gradient.then(|| vec![0.0; model.layout().len()]);
    for (v, g) in parts {
        total += v;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, grad))
}

/// Monte Carlo estimate of log p(Y | θ) summed over units. The first
/// observation of each unit is conditioned on.
pub fn mc_loglik(model: &NpsdeModel, panel: &LatentPanel, options: &MonteCarloOptions, key: StreamKey) -> Result<f64> {
    panel_loglik(model, panel, options, key, false).map(|(v, _)| v)
}

/// [`mc_loglik`] and its gradient, using the same random streams.
pub fn mc_loglik_gradient(
    model: &NpsdeModel,
    panel: &LatentPanel,
    options: &MonteCarloOptions,
    key: StreamKey,
) -> Result<(f64, Vec<f64>)> {
    panel_loglik(model, panel, options, key, true).map(|(v, g)| (v, g.unwrap_or_default()))
}

/// Log posterior log p(Y | θ) + log P(θ) and its gradient.
pub fn log_posterior_gradient(
    model: &NpsdeModel,
    panel: &LatentPanel,
    options: &MonteCarloOptions,
    key: StreamKey,
) -> Result<(f64, Vec<f64>)> {
    let (ll, mut g) = mc_loglik_gradient(model, panel, options, key)?;
    let prior = model.log_prior();
    for (a, b) in g.iter_mut().zip(model.log_prior_gradient()) {
        *a += b;
    }
    Ok((ll + prior, g))
}
