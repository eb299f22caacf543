//! Irreversibility, surprisal and residual diagnostics for fitted models.
//!
//! All quantities are in nats.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{prepare_transition, transition_logdensity, PreparedTransition, TransitionDensityMethod};
use crate::linalg::psd_inv_sqrt;
use crate::model::{evaluate, SdeModel};
use crate::rng::StreamKey;
use crate::simulate::advance_steps;
use crate::statespace::LatentPanel;
use crate::types::StateVector;

/// Default Monte-Carlo sample count for expectations and tail probabilities.
pub const DEFAULT_SAMPLES: usize = 4096;
/// Smallest sample count accepted by [`tail_probability`].
pub const MIN_TAIL_SAMPLES: usize = 1000;
/// Smallest sample count accepted for a Monte-Carlo expected surprisal.
pub const MIN_EXPECTATION_SAMPLES: usize = 100;
/// Share of ACF lags that must fall inside the 95% band for a Markov verdict.
pub const MARKOV_PASS_FRACTION: f64 = 0.93;

/// σ = log P(x_to | x_from) − log P(x_from | x_to), same method both ways.
pub fn local_irreversibility<M: SdeModel + ?Sized>(
    model: &M,
    x_from: &[f64],
    x_to: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
) -> Result<f64> {
    let forward = transition_logdensity(model, x_from, x_to, dt, method)?;
    let backward = transition_logdensity(model, x_to, x_from, dt, method)?;
    Ok(forward - backward)
}

/// Path irreversibility Σ and its per-transition series σ_k.
pub fn path_irreversibility<M: SdeModel + ?Sized>(
    model: &M,
    trajectory: &[StateVector],
    times: &[f64],
    method: &TransitionDensityMethod,
) -> Result<(f64, Vec<f64>)> {
    if trajectory.len() < 2 || trajectory.len() != times.len() {
        return Err(Error::InvalidArgument("path needs at least two states with matching times".into()));
    }
    let series = trajectory
        .windows(2)
        .zip(times.windows(2))
        .enumerate()
        .map(|(k, (xs, ts))| {
            local_irreversibility(model, &xs[0], &xs[1], ts[1] - ts[0], method)
                .map_err(|e| Error::Segment { segment: k, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((series.iter().sum(), series))
}

/// s = −log P(x_to | x_from).
pub fn surprisal<M: SdeModel + ?Sized>(
    model: &M,
    x_from: &[f64],
    x_to: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
) -> Result<f64> {
    Ok(-transition_logdensity(model, x_from, x_to, dt, method)?)
}

/// E[s] under the successor distribution of one state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurprisalExpectation {
    pub value: f64,
    /// Monte-Carlo sample count; `None` for the closed form.
    pub samples: Option<usize>,
    pub standard_error: Option<f64>,
}

/// Expected surprisal of a successor of `x_from`.
///
/// Gaussian methods use the differential entropy of the transition Gaussian.
/// The kernel-density method averages −log P over `samples` successors
/// simulated with the method's sub-stepping.
pub fn expected_surprisal<M: SdeModel + ?Sized>(
    model: &M,
    x_from: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
    samples: usize,
    seed: StreamKey,
) -> Result<SurprisalExpectation> {
    let prepared = prepare_transition(model, x_from, dt, method)?;
    match prepared.entropy() {
        Some(value) => Ok(SurprisalExpectation { value, samples: None, standard_error: None }),
        None => monte_carlo_expectation(model, &prepared, x_from, dt, method, samples, seed),
    }
}

/// Monte-Carlo expected surprisal regardless of method.
pub fn expected_surprisal_monte_carlo<M: SdeModel + ?Sized>(
    model: &M,
    x_from: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
    samples: usize,
    seed: StreamKey,
) -> Result<SurprisalExpectation> {
    let prepared = prepare_transition(model, x_from, dt, method)?;
    monte_carlo_expectation(model, &prepared, x_from, dt, method, samples, seed)
}

fn monte_carlo_expectation<M: SdeModel + ?Sized>(
    model: &M,
    prepared: &PreparedTransition,
    x_from: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
    samples: usize,
    seed: StreamKey,
) -> Result<SurprisalExpectation> {
    if samples < MIN_EXPECTATION_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "Monte-Carlo expected surprisal needs at least {MIN_EXPECTATION_SAMPLES} samples, got {samples}"
        )));
    }
    let s = simulated_surprisals(model, prepared, x_from, dt, method, samples, seed)?;
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(SurprisalExpectation { value: mean, samples: Some(samples), standard_error: Some((var / n).sqrt()) })
}

fn simulated_surprisals<M: SdeModel + ?Sized>(
    model: &M,
    prepared: &PreparedTransition,
    x_from: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
    samples: usize,
    seed: StreamKey,
) -> Result<Vec<f64>> {
    let steps = method.simulation_steps();
    (0..samples)
        .map(|k| {
            let y = advance_steps(model, x_from, dt, steps, &mut seed.child(k as u64).stream())?;
            Ok(-prepared.logpdf(&y))
        })
        .collect()
}

/// s̃ = s − E[s].
pub fn normalized_surprisal<M: SdeModel + ?Sized>(
    model: &M,
    x_from: &[f64],
    x_to: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
    samples: usize,
    seed: StreamKey,
) -> Result<f64> {
    let s = surprisal(model, x_from, x_to, dt, method)?;
    Ok(s - expected_surprisal(model, x_from, dt, method, samples, seed)?.value)
}

/// Fraction of `samples` simulated successors of `x_from` whose s̃ exceeds the
/// observed one. Small values flag anomalous transitions.
pub fn tail_probability<M: SdeModel + ?Sized>(
    model: &M,
    x_from: &[f64],
    x_to: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
    samples: usize,
    seed: StreamKey,
) -> Result<f64> {
    let prepared = prepare_transition(model, x_from, dt, method)?;
    tail_from_prepared(model, &prepared, x_from, x_to, dt, method, samples, seed)
}

// s̃ of the observed and simulated successors share the same centering term,
// so comparing raw surprisals is equivalent.
#[allow(clippy::too_many_arguments)]
fn tail_from_prepared<M: SdeModel + ?Sized>(
    model: &M,
    prepared: &PreparedTransition,
    x_from: &[f64],
    x_to: &[f64],
    dt: f64,
    method: &TransitionDensityMethod,
    samples: usize,
    seed: StreamKey,
) -> Result<f64> {
    if samples < MIN_TAIL_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "tail probability needs at least {MIN_TAIL_SAMPLES} samples, got {samples}"
        )));
    }
    let observed = -prepared.logpdf(x_to);
    let sims = simulated_surprisals(model, prepared, x_from, dt, method, samples, seed)?;
    Ok(sims.iter().filter(|&&s| s > observed).count() as f64 / samples as f64)
}

/// Settings for [`diagnose_panel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub method: TransitionDensityMethod,
    /// Monte-Carlo sample count S for expectations and tail probabilities.
    pub samples: usize,
    pub seed: u64,
    /// Skip the tail-probability simulation.
    pub skip_tail: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { method: TransitionDensityMethod::default(), samples: DEFAULT_SAMPLES, seed: 0, skip_tail: false }
    }
}

/// Diagnostics of one observed transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub unit_id: String,
    /// Observation time of the starting state, in source units.
    pub t_obs: f64,
    /// Simulation-time interval.
    pub dt: f64,
    pub spans_gap: bool,
    pub sigma: f64,
    pub surprisal: f64,
    pub normalized_surprisal: f64,
    pub tail_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub unit_id: String,
    pub transitions: usize,
    /// Σ = Σ_t σ_t.
    pub path_irreversibility: f64,
    pub mean_normalized_surprisal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsMetadata {
    pub method: TransitionDensityMethod,
    pub n_sub: usize,
    pub samples: usize,
    pub seed: u64,
}

/// Per-transition diagnostics for a whole panel, ordered by (unit, t).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub metadata: DiagnosticsMetadata,
    pub records: Vec<TransitionRecord>,
    pub units: Vec<UnitSummary>,
}

/// Computes σ_t, s_t, s̃_t and tail probabilities for every transition.
///
/// Units are processed in parallel; each transition draws from its own stream
/// keyed by unit id and index, so the report does not depend on scheduling.
pub fn diagnose_panel<M: SdeModel + ?Sized>(
    model: &M,
    panel: &LatentPanel,
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsReport> {
    config.method.validate()?;
    if panel.dim != model.dim() {
        return Err(Error::Shape(format!("panel dimension {} != model dimension {}", panel.dim, model.dim())));
    }
    let root = StreamKey::new(config.seed, 0).child_named("diagnostics");
    let per_unit = panel
        .units
        .par_iter()
        .map(|unit| {
            let key = root.child_named(&unit.unit_id);
            unit.transitions()
                .map(|tr| {
                    let seed = key.child(tr.index as u64);
                    let fwd = prepare_transition(model, tr.from, tr.dt, &config.method)?;
                    let bwd = transition_logdensity(model, tr.to, tr.from, tr.dt, &config.method)?;
                    let logp = fwd.logpdf(tr.to);
                    let expected = match fwd.entropy() {
                        Some(h) => h,
                        None => {
                            monte_carlo_expectation(
                                model,
                                &fwd,
                                tr.from,
                                tr.dt,
                                &config.method,
                                config.samples,
                                seed.child_named("expectation"),
                            )?
                            .value
                        }
                    };
                    let tail_prob = if config.skip_tail {
                        None
                    } else {
                        Some(tail_from_prepared(
                            model,
                            &fwd,
                            tr.from,
                            tr.to,
                            tr.dt,
                            &config.method,
                            config.samples,
                            seed.child_named("tail"),
                        )?)
                    };
                    Ok(TransitionRecord {
                        unit_id: unit.unit_id.clone(),
                        t_obs: unit.t_obs[tr.index],
                        dt: tr.dt,
                        spans_gap: tr.spans_gap,
                        sigma: logp - bwd,
                        surprisal: -logp,
                        normalized_surprisal: -logp - expected,
                        tail_prob,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut units = Vec::new();
    for (unit, recs) in panel.units.iter().zip(per_unit) {
        let n = recs.len();
        units.push(UnitSummary {
            unit_id: unit.unit_id.clone(),
            transitions: n,
            path_irreversibility: recs.iter().map(|r| r.sigma).sum(),
            mean_normalized_surprisal: if n == 0 {
                0.0
            } else {
                recs.iter().map(|r| r.normalized_surprisal).sum::<f64>() / n as f64
            },
        });
        records.extend(recs);
    }
    Ok(DiagnosticsReport {
        metadata: DiagnosticsMetadata {
            method: config.method,
            n_sub: config.method.simulation_steps(),
            samples: config.samples,
            seed: config.seed,
        },
        records,
        units,
    })
}

impl DiagnosticsReport {
    /// One CSV row per transition. `sigma_cum` is the running Σ within the unit.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "t", "dt", "spans_gap", "sigma", "sigma_cum", "s", "s_tilde", "tail_prob"])?;
        let mut running = 0.0;
        for (i, r) in self.records.iter().enumerate() {
            if i == 0 || self.records[i - 1].unit_id != r.unit_id {
                running = 0.0;
            }
            running += r.sigma;
            w.write_record([
                r.unit_id.clone(),
                r.t_obs.to_string(),
                r.dt.to_string(),
                r.spans_gap.to_string(),
                r.sigma.to_string(),
                running.to_string(),
                r.surprisal.to_string(),
                r.normalized_surprisal.to_string(),
                r.tail_prob.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Whitened one-step residuals r = (2 D(x) Δt)^{-1/2} (Δx − F(x) Δt) of one
/// contiguous run of observations.
pub fn residuals<M: SdeModel + ?Sized>(model: &M, states: &[StateVector], times: &[f64]) -> Result<Vec<Vec<f64>>> {
    if states.len() != times.len() {
        return Err(Error::Shape("states and times differ in length".into()));
    }
    states
        .windows(2)
        .zip(times.windows(2))
        .map(|(xs, ts)| {
            let dt = ts[1] - ts[0];
            let (f, d) = evaluate(model, &xs[0])?;
            let w = psd_inv_sqrt(&d.scaled(2.0 * dt))?;
            let innov: Vec<f64> = (0..xs[0].len()).map(|i| xs[1][i] - xs[0][i] - f[i] * dt).collect();
            Ok(w.mul_vec(&innov))
        })
        .collect()
}

/// Autocorrelation of one residual dimension with its 95% white-noise band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcfSeries {
    /// Lags 0..=max_lag; entry 0 is 1.
    pub values: Vec<f64>,
    pub band: f64,
    pub n: usize,
}

impl AcfSeries {
    /// Share of lags 1..=max_lag inside ±band.
    pub fn fraction_inside(&self) -> f64 {
        let lags = &self.values[1..];
        lags.iter().filter(|v| v.abs() <= self.band).count() as f64 / lags.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualAcf {
    pub dimensions: Vec<AcfSeries>,
    /// Share of lags inside the band over all dimensions.
    pub fraction_inside: f64,
    /// True when `fraction_inside >= MARKOV_PASS_FRACTION`.
    pub markovian: bool,
}

/// Pooled residual ACF over all gap-free runs of the panel.
///
/// Lagged products never cross unit or gap boundaries; the pooled mean and
/// variance normalize every lag (biased estimator).
pub fn residual_acf<M: SdeModel + ?Sized>(model: &M, panel: &LatentPanel, max_lag: usize) -> Result<ResidualAcf> {
    if max_lag == 0 {
        return Err(Error::InvalidArgument("max_lag must be at least 1".into()));
    }
    let mut runs: Vec<Vec<Vec<f64>>> = Vec::new();
    for unit in &panel.units {
        for run in unit.contiguous_runs() {
            if run.len() >= 2 {
                runs.push(residuals(model, &unit.states[run.clone()], &unit.times[run])?);
            }
        }
    }
    let n: usize = runs.iter().map(Vec::len).sum();
    if n < max_lag + 2 {
        return Err(Error::InsufficientData(format!("{n} transitions for an ACF up to lag {max_lag}")));
    }
    let dimensions = (0..panel.dim)
        .map(|j| {
            let series: Vec<Vec<f64>> = runs.iter().map(|r| r.iter().map(|v| v[j]).collect()).collect();
            pooled_acf(&series, max_lag)
        })
        .collect::<Result<Vec<_>>>()?;
    let inside: usize = dimensions.iter().map(|a| a.values[1..].iter().filter(|v| v.abs() <= a.band).count()).sum();
    let fraction_inside = inside as f64 / (max_lag * dimensions.len()) as f64;
    Ok(ResidualAcf { dimensions, fraction_inside, markovian: fraction_inside >= MARKOV_PASS_FRACTION })
}

/// ACF pooled over independent segments of one scalar series.
pub fn pooled_acf(segments: &[Vec<f64>], max_lag: usize) -> Result<AcfSeries> {
    let n: usize = segments.iter().map(Vec::len).sum();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} values")));
    }
    let mean = segments.iter().flatten().sum::<f64>() / n as f64;
    let denom: f64 = segments.iter().flatten().map(|v| (v - mean).powi(2)).sum();
    let scale = segments.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    if !(denom > (1e-12 * scale).powi(2) * n as f64) {
        return Err(Error::DegenerateSeries);
    }
    let mut values = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let num: f64 = segments
            .iter()
            .filter(|s| s.len() > lag)
            .map(|s| (0..s.len() - lag).map(|t| (s[t] - mean) * (s[t + lag] - mean)).sum::<f64>())
            .sum();
        values.push(num / denom);
    }
    Ok(AcfSeries { values, band: 1.96 / (n as f64).sqrt(), n })
}

/// Standard biased ACF of a single series at lags 0..=max_lag.
pub fn series_acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() <= max_lag {
        return Err(Error::InsufficientData(format!("{} values for lag {max_lag}", series.len())));
    }
    Ok(pooled_acf(&[series.to_vec()], max_lag)?.values)
}
