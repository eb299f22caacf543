//! Imputation of unobserved intermediate states by importance sampling
//! against a fitted SDE, with sequential reweighting for several query times.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{prepare_transition, TransitionDensityMethod};
use crate::model::SdeModel;
use crate::rng::StreamKey;
use crate::simulate::advance_steps;
use crate::statespace::LatentPanel;
use crate::types::{StateVector, TimeRescaling};

/// Weighted and resampled particle population at one query time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSample {
    pub query_time: f64,
    pub candidates: Vec<StateVector>,
    /// Normalized importance weights, aligned with `candidates`.
    pub weights: Vec<f64>,
    pub resampled: Vec<StateVector>,
    /// 1 / Σ w², before resampling.
    pub effective_sample_size: f64,
    pub max_logweight: f64,
    pub warning: Option<String>,
}

impl BridgeSample {
    /// Mean of the resampled population.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.resampled.len() as f64;
        let d = self.resampled.first().map_or(0, |x| x.dim());
        (0..d).map(|j| self.resampled.iter().map(|x| x[j]).sum::<f64>() / n).collect()
    }

    /// Per-dimension sample standard deviation of the resampled population.
    pub fn std(&self) -> Vec<f64> {
        let n = self.resampled.len() as f64;
        self.mean()
            .iter()
            .enumerate()
            .map(|(j, m)| (self.resampled.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt())
            .collect()
    }
}

/// Settings for [`impute_gap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeConfig {
    /// Particle count S.
    pub samples: usize,
    pub rescaling: TimeRescaling,
    /// Endpoint density. `None` picks one-step Gaussian when the remaining
    /// interval is a single sub-step and composed Gaussian otherwise.
    pub endpoint_method: Option<TransitionDensityMethod>,
    /// ESS below `samples * ess_warning_fraction` records a warning.
    pub ess_warning_fraction: f64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self { samples: 4096, rescaling: TimeRescaling::identity(), endpoint_method: None, ess_warning_fraction: 0.01 }
    }
}

impl ImputeConfig {
    fn method_for(&self, interval: f64) -> TransitionDensityMethod {
        match self.endpoint_method {
            Some(m) => m,
            None => match self.rescaling.steps_for(interval) {
                1 => TransitionDensityMethod::OneStepGaussian,
                n_sub => TransitionDensityMethod::ComposedGaussian { n_sub },
            },
        }
    }
}

/// S forward Euler–Maruyama endpoints at `t` from `x0` at `t0`.
pub fn propose_forward<M: SdeModel + ?Sized>(
    model: &M,
    x0: &[f64],
    t0: f64,
    t: f64,
    samples: usize,
    rescaling: &TimeRescaling,
    seed: StreamKey,
) -> Result<Vec<StateVector>> {
    if !(t > t0) {
        return Err(Error::InvalidArgument(format!("proposal interval [{t0}, {t}] is empty")));
    }
    let steps = rescaling.steps_for(t - t0);
    (0..samples)
        .into_par_iter()
        .map(|s| advance_steps(model, x0, t - t0, steps, &mut seed.child(s as u64).stream()))
        .collect()
}

/// log P(x_T | candidate) over t_T − t; the unnormalized log-weight.
pub fn endpoint_logweight<M: SdeModel + ?Sized>(
    model: &M,
    candidate: &[f64],
    x_end: &[f64],
    t: f64,
    t_end: f64,
    method: &TransitionDensityMethod,
) -> Result<f64> {
    if !(t_end > t) {
        return Err(Error::InvalidArgument(format!("query time {t} is not before the endpoint {t_end}")));
    }
    Ok(prepare_transition(model, candidate, t_end - t, method)?.logpdf(x_end))
}

/// exp of [`endpoint_logweight`].
pub fn endpoint_weight<M: SdeModel + ?Sized>(
    model: &M,
    candidate: &[f64],
    x_end: &[f64],
    t: f64,
    t_end: f64,
    method: &TransitionDensityMethod,
) -> Result<f64> {
    Ok(endpoint_logweight(model, candidate, x_end, t, t_end, method)?.exp())
}

/// Normalized weights after shifting by the maximum log-weight, with the ESS
/// and the maximum itself.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights { max_logweight: max, ess: 0.0 });
    }
    let raw: Vec<f64> = log_weights.iter().map(|l| if l.is_nan() { 0.0 } else { (l - max).exp() }).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    Ok((weights, ess, max))
}

fn lexicographic(a: &StateVector, b: &StateVector) -> Ordering {
    a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Systematic resampling with a single uniform offset `u ∈ [0, 1)`.
///
/// Candidates are visited in lexicographic order, so the result does not
/// depend on how the input is ordered.
pub fn bridge_resample(candidates: &[StateVector], weights: &[f64], u: f64) -> Result<Vec<StateVector>> {
    if candidates.len() != weights.len() || candidates.is_empty() {
        return Err(Error::Shape("candidates and weights must be non-empty and aligned".into()));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::InvalidArgument(format!("offset {u} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| lexicographic(&candidates[a], &candidates[b]));
    let n = candidates.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut pos = 0;
    for i in 0..n {
        let target = (i as f64 + u) / n as f64;
        while pos + 1 < n && cumulative + weights[order[pos]] <= target {
            cumulative += weights[order[pos]];
            pos += 1;
        }
        out.push(candidates[order[pos]].clone());
    }
    Ok(out)
}

/// Samples the bridge distribution of the state at each query time given
/// `x0` at `t0` and `x_end` at `t_end`.
///
/// The first query time is reached by forward proposals weighted against the
/// endpoint. Later ones propagate the resampled population and reweight by
/// P(x_T | x_new) / P(x_T | x_old).
#[allow(clippy::too_many_arguments)]
pub fn impute_gap<M: SdeModel + ?Sized>(
    model: &M,
    x0: &[f64],
    t0: f64,
    x_end: &[f64],
    t_end: f64,
    query_times: &[f64],
    config: &ImputeConfig,
    seed: StreamKey,
) -> Result<Vec<BridgeSample>> {
    if query_times.is_empty() {
        return Ok(Vec::new());
    }
    if config.samples < 2 {
        return Err(Error::InvalidArgument("imputation needs at least two samples".into()));
    }
    let mut prev_t = t0;
    for &q in query_times {
        if !(q > prev_t && q < t_end) {
            return Err(Error::InvalidArgument(format!(
                "query times must increase strictly inside ({t0}, {t_end}); got {q}"
            )));
        }
        prev_t = q;
    }

    let mut out: Vec<BridgeSample> = Vec::with_capacity(query_times.len());
    let mut population: Vec<StateVector> = vec![StateVector::from(x0); config.samples];
    let mut previous_logp: Option<Vec<f64>> = None;
    let mut t_prev = t0;
    for (qi, &q) in query_times.iter().enumerate() {
        let key = seed.child(qi as u64);
        let steps = config.rescaling.steps_for(q - t_prev);
        let candidates: Vec<StateVector> = population
            .par_iter()
            .enumerate()
            .map(|(s, x)| advance_steps(model, x, q - t_prev, steps, &mut key.child(s as u64).stream()))
            .collect::<Result<_>>()?;
        let method = config.method_for(t_end - q);
        let logp: Vec<f64> = candidates
            .par_iter()
            .map(|c| endpoint_logweight(model, c, x_end, q, t_end, &method))
            .collect::<Result<_>>()?;
        let log_weights: Vec<f64> = match &previous_logp {
            None => logp.clone(),
            Some(prev) => logp.iter().zip(prev).map(|(a, b)| a - b).collect(),
        };
        let (weights, ess, max_logweight) = normalize_log_weights(&log_weights)?;
        if ess < 2.0 {
            return Err(Error::DegenerateWeights { max_logweight, ess });
        }
        let warning = (ess < config.samples as f64 * config.ess_warning_fraction).then(|| {
            format!("effective sample size {ess:.1} below {:.1}", config.samples as f64 * config.ess_warning_fraction)
        });
        let u = key.child_named("resample").stream().uniform();
        // Resample indices so the parents' endpoint log-densities travel with them.
        let indexed: Vec<StateVector> = (0..candidates.len()).map(|i| StateVector::new(vec![i as f64])).collect();
        let mut sorted: Vec<usize> = (0..candidates.len()).collect();
        sorted.sort_by(|&a, &b| lexicographic(&candidates[a], &candidates[b]));
        let mut rank_weights = vec![0.0; candidates.len()];
        for (rank, &i) in sorted.iter().enumerate() {
            rank_weights[rank] = weights[i];
        }
        let picks = bridge_resample(&indexed, &rank_weights, u)?;
        let chosen: Vec<usize> = picks.iter().map(|p| sorted[p[0] as usize]).collect();
        let resampled: Vec<StateVector> = chosen.iter().map(|&i| candidates[i].clone()).collect();
        previous_logp = Some(chosen.iter().map(|&i| logp[i]).collect());
        population = resampled.clone();
        t_prev = q;
        out.push(BridgeSample {
            query_time: q,
            candidates,
            weights,
            resampled,
            effective_sample_size: ess,
            max_logweight,
            warning,
        });
    }
    Ok(out)
}

/// Imputed states for one gap of a latent panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputedGap {
    pub unit_id: String,
    pub samples: Vec<BridgeSample>,
    /// Query times in source units.
    pub query_times_obs: Vec<f64>,
}

/// Imputes every gap of `panel` at the nominal observation times strictly
/// inside it. Gaps are processed in parallel with streams keyed by unit and
/// gap start.
pub fn impute_panel<M: SdeModel + ?Sized>(
    model: &M,
    panel: &LatentPanel,
    config: &ImputeConfig,
    seed: u64,
) -> Result<Vec<ImputedGap>> {
    let root = StreamKey::new(seed, 0).child_named("impute");
    let nominal = panel.nominal_interval_obs;
    panel
        .gaps
        .par_iter()
        .map(|gap| {
            let unit = panel
                .unit(&gap.unit_id)
                .ok_or_else(|| Error::InvalidArgument(format!("gap refers to unknown unit `{}`", gap.unit_id)))?;
            let k = unit
                .times
                .iter()
                .position(|&t| t == gap.t_start)
                .filter(|&k| k + 1 < unit.len())
                .ok_or_else(|| Error::InvalidArgument(format!("gap start {} not found in unit", gap.t_start)))?;
            let (s_obs, e_obs) = (unit.t_obs[k], unit.t_obs[k + 1]);
            let steps = ((e_obs - s_obs) / nominal - 1e-9).ceil() as usize;
            let query_obs: Vec<f64> = (1..steps).map(|j| s_obs + j as f64 * nominal).filter(|&t| t < e_obs).collect();
            let query: Vec<f64> = query_obs.iter().map(|&t| config.rescaling.to_simulation(t)).collect();
            let key = root.child_named(&gap.unit_id).child(gap.t_start.to_bits());
            let samples = impute_gap(model, &unit.states[k], gap.t_start, &unit.states[k + 1], gap.t_end, &query, config, key)?;
            Ok(ImputedGap { unit_id: gap.unit_id.clone(), samples, query_times_obs: query_obs })
        })
        .collect()
}

/// CSV with one row per (unit, query time): posterior mean and std per
/// dimension, then the ESS.
pub fn write_imputation_csv<W: Write>(gaps: &[ImputedGap], axis_names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unit".to_string(), "query_time".to_string()];
    header.extend(axis_names.iter().map(|a| format!("mean_{a}")));
    header.extend(axis_names.iter().map(|a| format!("std_{a}")));
    header.push("ess".into());
    w.write_record(&header)?;
    for g in gaps {
        for (sample, t) in g.samples.iter().zip(&g.query_times_obs) {
            let mut row = vec![g.unit_id.clone(), t.to_string()];
            row.extend(sample.mean().iter().map(f64::to_string));
            row.extend(sample.std().iter().map(f64::to_string));
            row.push(sample.effective_sample_size.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearSde;

    fn sv(v: f64) -> StateVector {
        StateVector::new(vec![v])
    }

    #[test]
    fn log_space_weights_match_direct_computation() {
        let logw = [-1.0, -2.5, 0.3, -0.7];
        let direct: Vec<f64> = logw.iter().map(|l: &f64| l.exp()).collect();
        let total: f64 = direct.iter().sum();
        let (w, ess, max) = normalize_log_weights(&logw).unwrap();
        assert_eq!(max, 0.3);
        for (a, b) in w.iter().zip(&direct) {
            assert!((a - b / total).abs() < 1e-15);
        }
        assert!(ess >= 1.0 && ess <= 4.0);
    }

    #[test]
    fn extreme_log_weights_do_not_underflow() {
        let (w, ess, _) = normalize_log_weights(&[-1e4, -1e4 - 1.0]).unwrap();
        assert!((w[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
        assert!(ess > 1.0);
    }

    #[test]
    fn all_impossible_weights_are_degenerate() {
        assert!(matches!(
            normalize_log_weights(&[f64::NEG_INFINITY; 3]),
            Err(Error::DegenerateWeights { .. })
        ));
    }

    #[test]
    fn mode_candidate_gets_largest_weight() {
        let m = LinearSde::constant_drift(vec![0.5], 0.3);
        let method = TransitionDensityMethod::OneStepGaussian;
        let x_end = [2.0];
        let mode = endpoint_logweight(&m, &[1.5], &x_end, 0.0, 1.0, &method).unwrap();
        let left = endpoint_logweight(&m, &[1.2], &x_end, 0.0, 1.0, &method).unwrap();
        let right = endpoint_logweight(&m, &[1.8], &x_end, 0.0, 1.0, &method).unwrap();
        assert!(mode > left && mode > right);
        assert!((left - right).abs() < 1e-12);
    }

    #[test]
    fn point_mass_weight_resamples_to_one_candidate() {
        let c = vec![sv(0.0), sv(1.0), sv(2.0)];
        let r = bridge_resample(&c, &[0.0, 1.0, 0.0], 0.7).unwrap();
        assert!(r.iter().all(|x| x[0] == 1.0));
    }

    #[test]
    fn uniform_weights_preserve_the_multiset() {
        let c: Vec<StateVector> = [3.0, -1.0, 0.5, 2.0].iter().map(|&v| sv(v)).collect();
        let r = bridge_resample(&c, &[0.25; 4], 0.3).unwrap();
        let mut a: Vec<f64> = r.iter().map(|x| x[0]).collect();
        a.sort_by(f64::total_cmp);
        assert_eq!(a, vec![-1.0, 0.5, 2.0, 3.0]);
    }

    #[test]
    fn resampling_ignores_input_order() {
        let c: Vec<StateVector> = [0.1, 0.9, 0.4, 0.6].iter().map(|&v| sv(v)).collect();
        let w = [0.1, 0.4, 0.3, 0.2];
        let a = bridge_resample(&c, &w, 0.42).unwrap();
        let rev_c: Vec<StateVector> = c.iter().rev().cloned().collect();
        let rev_w: Vec<f64> = w.iter().rev().copied().collect();
        let b = bridge_resample(&rev_c, &rev_w, 0.42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_query_is_a_no_op() {
        let m = LinearSde::brownian(1, 0.5);
        let out = impute_gap(&m, &[0.0], 0.0, &[1.0], 1.0, &[], &ImputeConfig::default(), StreamKey::new(0, 0)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn single_substep_proposal_is_one_em_step() {
        let m = LinearSde::constant_drift(vec![1.0], 0.5);
        let r = TimeRescaling::new(1.0, 4).unwrap();
        let c = propose_forward(&m, &[0.0], 0.0, 0.25, 3, &r, StreamKey::new(1, 2)).unwrap();
        for (s, x) in c.iter().enumerate() {
            let z = StreamKey::new(1, 2).child(s as u64).stream().normal();
            assert!((x[0] - (0.25 + z * 0.25f64.sqrt())).abs() < 1e-12);
        }
    }

    #[test]
    fn query_outside_gap_is_rejected() {
        let m = LinearSde::brownian(1, 0.5);
        let r = impute_gap(&m, &[0.0], 0.0, &[1.0], 1.0, &[1.0], &ImputeConfig::default(), StreamKey::new(0, 0));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
