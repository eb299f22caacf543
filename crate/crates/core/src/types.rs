use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the latent state space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for StateVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for StateVector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

/// Maps source time to simulation time and fixes the internal integration step.
///
/// One source time unit becomes `alpha` units of simulation time, and each such
/// unit interval is integrated with `n_sub` Euler–Maruyama sub-steps, so the
/// internal step is `alpha / n_sub`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeRescaling {
    pub alpha: f64,
    pub n_sub: usize,
}

impl TimeRescaling {
    pub fn new(alpha: f64, n_sub: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if n_sub == 0 {
            return Err(Error::InvalidArgument("n_sub must be at least 1".into()));
        }
        Ok(Self { alpha, n_sub })
    }

    pub fn identity() -> Self {
        Self { alpha: 1.0, n_sub: 1 }
    }

    /// Rescaling whose internal step is `delta_t` for a given `alpha`.
    pub fn with_substep(alpha: f64, delta_t: f64) -> Result<Self> {
        if !(delta_t > 0.0) {
            return Err(Error::InvalidArgument(format!("delta_t must be positive, got {delta_t}")));
        }
        Self::new(alpha, ((alpha / delta_t).round() as usize).max(1))
    }

    pub fn to_simulation(&self, t_obs: f64) -> f64 {
        self.alpha * t_obs
    }

    /// Simulation-time length of one source time unit.
    pub fn unit_interval(&self) -> f64 {
        self.alpha
    }

    /// Internal integration step δt.
    pub fn substep(&self) -> f64 {
        self.alpha / self.n_sub as f64
    }

    /// Number of equal sub-steps (each ≤ δt up to round-off) covering `interval`.
    pub fn steps_for(&self, interval: f64) -> usize {
        let raw = interval / self.substep();
        let n = (raw - 1e-9).ceil();
        (n.max(1.0)) as usize
    }
}

impl Default for TimeRescaling {
    fn default() -> Self {
        Self::identity()
    }
}
