use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

/// Running first and second moments of parameter snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwagState {
    #[serde(with = "super::params_base64")]
    pub mean: Vec<f64>,
    #[serde(with = "super::params_base64")]
    pub second_moment: Vec<f64>,
    pub count: usize,
}

impl SwagState {
    pub fn new(len: usize) -> Self {
        Self { mean: vec![0.0; len], second_moment: vec![0.0; len], count: 0 }
    }

    /// Folds one snapshot into the running moments.
    pub fn collect(&mut self, params: &[f64]) {
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for ((m, s), p) in self.mean.iter_mut().zip(self.second_moment.iter_mut()).zip(params) {
            *m += w * (p - *m);
            *s += w * (p * p - *s);
        }
    }

    /// Diagonal variance θ²̄ − θ̄², clamped at zero.
    pub fn variance(&self) -> Vec<f64> {
        self.mean.iter().zip(&self.second_moment).map(|(m, s)| (s - m * m).max(0.0)).collect()
    }
}

/// θ ~ N(θ̄, diag(θ²̄ − θ̄²)).
pub fn swag_sample(state: &SwagState, rng: &mut RngStream) -> Vec<f64> {
    state
        .mean
        .iter()
        .zip(state.variance())
        .map(|(m, v)| {
            let z = rng.normal();
            if v > 0.0 {
                m + v.sqrt() * z
            } else {
                *m
            }
        })
        .collect()
}
