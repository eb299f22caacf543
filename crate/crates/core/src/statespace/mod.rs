//! From a raw multi-unit panel to latent state trajectories.
//!
//! The pipeline is: [`ingest_csv`] → optional log10 of wide-range columns →
//! standardization → PCA on the correlation matrix ([`pca_fit`]) →
//! projection of complete observations ([`pca_project`]) with simulation-time
//! rescaling. No interpolation happens here; incomplete or absent
//! observations become recorded gaps.

mod csv;
mod pca;

pub use self::csv::{ingest_csv, ingest_reader, CsvSchema};
pub use self::pca::{pca_fit, pca_project, PcaConfig, PcaModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{StateVector, TimeRescaling};

/// One observation row: source time and possibly-missing values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t_obs: f64,
    pub values: Vec<Option<f64>>,
}

impl Observation {
    pub fn is_complete_on(&self, columns: &[usize]) -> bool {
        columns.iter().all(|&c| self.values[c].is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    /// Strictly increasing in `t_obs`.
    pub observations: Vec<Observation>,
}

/// Raw multi-unit panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub columns: Vec<String>,
    pub units: Vec<UnitRecord>,
}

impl Panel {
    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("unknown column `{name}`")))
    }

    pub fn observation_count(&self) -> usize {
        self.units.iter().map(|u| u.observations.len()).sum()
    }

    /// Most common spacing between consecutive observations, the panel's
    /// nominal sampling interval in source time units.
    pub fn nominal_interval(&self) -> Option<f64> {
        let mut gaps: Vec<f64> = self
            .units
            .iter()
            .flat_map(|u| u.observations.windows(2).map(|w| w[1].t_obs - w[0].t_obs))
            .collect();
        modal_interval(&mut gaps)
    }
}

pub(crate) fn modal_interval(gaps: &mut [f64]) -> Option<f64> {
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut best = (gaps[0], 0usize);
    let mut i = 0;
    while i < gaps.len() {
        let v = gaps[i];
        let mut j = i;
        while j < gaps.len() && (gaps[j] - v).abs() <= 1e-9 * v.abs().max(1.0) {
            j += 1;
        }
        if j - i > best.1 {
            best = (v, j - i);
        }
        i = j;
    }
    Some(best.0)
}

/// A missing-data span between two retained observations of one unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSpan {
    pub unit_id: String,
    /// Simulation time of the last retained observation before the gap.
    pub t_start: f64,
    /// Simulation time of the first retained observation after the gap.
    pub t_end: f64,
    /// Incomplete rows dropped inside the span.
    pub dropped_rows: usize,
}

/// Latent trajectory of one unit at its retained (complete) observation times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentUnit {
    pub unit_id: String,
    pub t_obs: Vec<f64>,
    /// Simulation times, `alpha * t_obs`.
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    /// `gap_after[k]` marks the transition k → k+1 as spanning a gap.
    pub gap_after: Vec<bool>,
}

/// One observed transition of a unit.
#[derive(Clone, Copy, Debug)]
pub struct Transition<'a> {
    pub index: usize,
    pub t: f64,
    pub dt: f64,
    pub from: &'a StateVector,
    pub to: &'a StateVector,
    pub spans_gap: bool,
}

impl LatentUnit {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> + '_ {
        (0..self.states.len().saturating_sub(1)).map(move |k| Transition {
            index: k,
            t: self.times[k],
            dt: self.times[k + 1] - self.times[k],
            from: &self.states[k],
            to: &self.states[k + 1],
            spans_gap: self.gap_after[k],
        })
    }

    /// Maximal runs of gap-free consecutive observations, as index ranges.
    pub fn contiguous_runs(&self) -> Vec<std::ops::Range<usize>> {
        let mut runs = Vec::new();
        let mut start = 0;
        for (k, &gap) in self.gap_after.iter().enumerate() {
            if gap {
                runs.push(start..k + 1);
                start = k + 1;
            }
        }
        if !self.states.is_empty() {
            runs.push(start..self.states.len());
        }
        runs
    }
}

/// Latent trajectories for every unit plus the projection provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPanel {
    pub dim: usize,
    pub axis_names: Vec<String>,
    pub rescaling: TimeRescaling,
    /// Nominal observation interval in source time units.
    pub nominal_interval_obs: f64,
    pub units: Vec<LatentUnit>,
    pub gaps: Vec<GapSpan>,
}

impl LatentPanel {
    /// Builds a panel from trajectories already in latent coordinates, with
    /// times in source units. Gaps are inferred where spacing exceeds the modal
    /// interval.
    pub fn from_trajectories(
        trajectories: Vec<(String, Vec<f64>, Vec<StateVector>)>,
        rescaling: TimeRescaling,
    ) -> Result<Self> {
        let dim = trajectories
            .iter()
            .find_map(|(_, _, s)| s.first().map(StateVector::dim))
            .ok_or_else(|| Error::InsufficientData("no states".into()))?;
        let mut spacing: Vec<f64> =
            trajectories.iter().flat_map(|(_, t, _)| t.windows(2).map(|w| w[1] - w[0])).collect();
        let nominal = modal_interval(&mut spacing).unwrap_or(1.0);
        let mut units = Vec::with_capacity(trajectories.len());
        let mut gaps = Vec::new();
        for (unit_id, t_obs, states) in trajectories {
            if t_obs.len() != states.len() {
                return Err(Error::Shape(format!("unit `{unit_id}`: times and states differ in length")));
            }
            if states.iter().any(|s| s.dim() != dim) {
                return Err(Error::Shape(format!("unit `{unit_id}`: inconsistent state dimension")));
            }
            let dropped = vec![0; t_obs.len().saturating_sub(1)];
            let unit = build_unit(unit_id, t_obs, states, &dropped, nominal, &rescaling, &mut gaps)?;
            units.push(unit);
        }
        let axis_names = (0..dim).map(|i| format!("x{i}")).collect();
        Ok(Self { dim, axis_names, rescaling, nominal_interval_obs: nominal, units, gaps })
    }

    pub fn transition_count(&self) -> usize {
        self.units.iter().map(|u| u.len().saturating_sub(1)).sum()
    }

    /// Same trajectories under a different time rescaling.
    pub fn rescaled(&self, rescaling: TimeRescaling) -> LatentPanel {
        let mut out = self.clone();
        let factor = rescaling.alpha / self.rescaling.alpha;
        for u in &mut out.units {
            u.times = rescale_time(&u.t_obs, &rescaling);
        }
        for g in &mut out.gaps {
            g.t_start *= factor;
            g.t_end *= factor;
        }
        out.rescaling = rescaling;
        out
    }

    pub fn unit(&self, unit_id: &str) -> Option<&LatentUnit> {
        self.units.iter().find(|u| u.unit_id == unit_id)
    }
}

/// t = α · t_obs.
pub fn rescale_time(t_obs: &[f64], rescaling: &TimeRescaling) -> Vec<f64> {
    t_obs.iter().map(|&t| rescaling.to_simulation(t)).collect()
}

pub(crate) fn build_unit(
    unit_id: String,
    t_obs: Vec<f64>,
    states: Vec<StateVector>,
    dropped_between: &[usize],
    nominal: f64,
    rescaling: &TimeRescaling,
    gaps: &mut Vec<GapSpan>,
) -> Result<LatentUnit> {
    if t_obs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(format!("unit `{unit_id}`: times must be strictly increasing")));
    }
    let times = rescale_time(&t_obs, rescaling);
    let mut gap_after = Vec::with_capacity(t_obs.len().saturating_sub(1));
    for k in 0..t_obs.len().saturating_sub(1) {
        let span = t_obs[k + 1] - t_obs[k];
        let dropped = dropped_between[k];
        let is_gap = dropped > 0 || span > nominal * (1.0 + 1e-6);
        if is_gap {
            gaps.push(GapSpan { unit_id: unit_id.clone(), t_start: times[k], t_end: times[k + 1], dropped_rows: dropped });
        }
        gap_after.push(is_gap);
    }
    Ok(LatentUnit { unit_id, t_obs, times, states, gap_after })
}
