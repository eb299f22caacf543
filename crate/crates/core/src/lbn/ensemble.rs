use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigendecompose, Matrix, PsdMatrix};
use crate::model::SdeModel;
use crate::rng::StreamKey;
use crate::statespace::LatentPanel;
use crate::types::StateVector;

use super::mlp::MlpShape;
use super::swag::swag_sample;
use super::train::{fold_split, km_targets, train_fold, FoldLog, Head, LbnConfig, Normalization};
use super::{diffusion_eval, drift_eval};

/// Below this E‖F‖² the relative epistemic uncertainty is flagged as low-signal.
pub const LOW_SIGNAL_THRESHOLD: f64 = 1e-6;

/// One ensemble member's flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemberParams(#[serde(with = "super::params_base64")] pub Vec<f64>);

/// Parameter sets sampled from every fold's SWAG posterior. Drift and
/// diffusion are ensemble means over members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbnEnsemble {
    pub dim: usize,
    pub config: LbnConfig,
    pub normalization: Normalization,
    pub drift_shape: MlpShape,
    pub diffusion_shape: MlpShape,
    /// Stream id of each fold's training seed.
    pub fold_seeds: Vec<u64>,
    pub drift_members: Vec<MemberParams>,
    pub diffusion_members: Vec<MemberParams>,
}

impl LbnEnsemble {
    pub fn len(&self) -> usize {
        self.drift_members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drift_members.is_empty()
    }

    pub fn member_drift(&self, j: usize, x: &[f64]) -> StateVector {
        let n = &self.normalization;
        drift_eval(&self.drift_shape, &self.drift_members[j].0, &n.input, &n.drift_output, x)
    }

    pub fn member_diffusion(&self, j: usize, x: &[f64]) -> PsdMatrix {
        let n = &self.normalization;
        diffusion_eval(&self.diffusion_shape, &self.diffusion_members[j].0, &n.input, n.diffusion_scale, x)
    }

    /// Checks shapes after deserialization.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.drift_members.is_empty() || self.drift_members.len() != self.diffusion_members.len() {
            return bad("drift and diffusion member counts must match and be positive".into());
        }
        if self.drift_shape.input != self.dim || self.diffusion_shape.input != self.dim {
            return bad(format!("network input width differs from dimension {}", self.dim));
        }
        for (shape, members) in [(&self.drift_shape, &self.drift_members), (&self.diffusion_shape, &self.diffusion_members)] {
            if let Some(m) = members.iter().find(|m| m.0.len() != shape.param_count()) {
                return bad(format!("member has {} parameters, shape needs {}", m.0.len(), shape.param_count()));
            }
        }
        Ok(())
    }
}

impl SdeModel for LbnEnsemble {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &[f64]) -> StateVector {
        let mut acc = vec![0.0; self.dim];
        for j in 0..self.len() {
            for (a, f) in acc.iter_mut().zip(self.member_drift(j, x).iter()) {
                *a += f;
            }
        }
        let n = self.len() as f64;
        StateVector::new(acc.into_iter().map(|a| a / n).collect())
    }

    fn diffusion(&self, x: &[f64]) -> PsdMatrix {
        let mut acc = Matrix::zeros(self.dim, self.dim);
        for j in 0..self.len() {
            acc = acc.add(self.member_diffusion(j, x).as_matrix());
        }
        PsdMatrix::from_trusted(acc.scaled(1.0 / self.len() as f64))
    }
}

/// Trains every fold and head, then samples `ensemble_size / folds` members
/// from each fold's SWAG posterior.
///
/// Folds and heads train on parallel workers; each job has its own stream,
/// so the result does not depend on scheduling.
pub fn fit_lbn(panel: &LatentPanel, config: &LbnConfig, seed: u64) -> Result<(LbnEnsemble, Vec<FoldLog>)> {
    config.validate()?;
    let data = km_targets(panel)?;
    let norm = Normalization::from_dataset(&data);
    let root = StreamKey::new(seed, 0).child_named("lbn");
    let folds = fold_split(data.unit_ids.len(), config.folds, root.child_named("folds"))?;
    let fold_keys: Vec<StreamKey> = (0..folds.len()).map(|f| root.child(f as u64)).collect();
    let jobs: Vec<(usize, Head)> =
        (0..folds.len()).flat_map(|f| [(f, Head::Drift), (f, Head::Diffusion)]).collect();
    let trained = jobs
        .par_iter()
        .map(|&(f, head)| {
            train_fold(&data, &folds[f], head, &norm, config, fold_keys[f].child_named(head_label(head)))
        })
        .collect::<Result<Vec<_>>>()?;

    let per_fold = config.ensemble_size / config.folds;
    let mut drift_members = Vec::with_capacity(config.ensemble_size);
    let mut diffusion_members = Vec::with_capacity(config.ensemble_size);
    let mut logs = Vec::with_capacity(jobs.len());
    for (&(f, head), (swag, log)) in jobs.iter().zip(trained) {
        let mut rng = fold_keys[f].child_named("swag").child_named(head_label(head)).stream();
        let target = match head {
            Head::Drift => &mut drift_members,
            Head::Diffusion => &mut diffusion_members,
        };
        target.extend((0..per_fold).map(|_| MemberParams(swag_sample(&swag, &mut rng))));
        logs.push(log);
    }
    let ensemble = LbnEnsemble {
        dim: data.dim,
        config: config.clone(),
        normalization: norm,
        drift_shape: Head::Drift.shape(data.dim, &config.hidden),
        diffusion_shape: Head::Diffusion.shape(data.dim, &config.hidden),
        fold_seeds: fold_keys.iter().map(|k| k.stream_id).collect(),
        drift_members,
        diffusion_members,
    };
    Ok((ensemble, logs))
}

fn head_label(head: Head) -> &'static str {
    match head {
        Head::Drift => "drift",
        Head::Diffusion => "diffusion",
    }
}

/// Ensemble statistics at one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub drift_mean: Vec<f64>,
    /// Element-wise population standard deviation.
    pub drift_std: Vec<f64>,
    pub diffusion_mean: PsdMatrix,
    /// Population standard deviation of each member's sorted eigenvalues.
    pub diffusion_eigen_std: Vec<f64>,
}

pub fn ensemble_predict(ens: &LbnEnsemble, x: &[f64]) -> Result<EnsemblePrediction> {
    let n = ens.len();
    let d = ens.dim;
    let drifts: Vec<StateVector> = (0..n).map(|j| ens.member_drift(j, x)).collect();
    let diffs: Vec<PsdMatrix> = (0..n).map(|j| ens.member_diffusion(j, x)).collect();
    let eigs = diffs
        .iter()
        .map(|m| sym_eigendecompose(m.as_matrix()).map(|e| e.values))
        .collect::<Result<Vec<_>>>()?;
    let (drift_mean, drift_std) = population_moments(&drifts.iter().map(|v| v.to_vec()).collect::<Vec<_>>(), d);
    let (_, diffusion_eigen_std) = population_moments(&eigs, d);
    let mut acc = Matrix::zeros(d, d);
    for m in &diffs {
        acc = acc.add(m.as_matrix());
    }
    Ok(EnsemblePrediction {
        drift_mean,
        drift_std,
        diffusion_mean: PsdMatrix::from_trusted(acc.scaled(1.0 / n as f64)),
        diffusion_eigen_std,
    })
}

fn population_moments(rows: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let std = (0..d).map(|i| (rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    (mean, std)
}

/// Relative spread of a field's magnitude across ensemble members.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpistemicUncertainty {
    /// std[‖v‖] / √E[‖v‖²], 0 when E[‖v‖²] is exactly 0.
    pub sigma_epi: f64,
    pub second_moment: f64,
    /// Set when E[‖v‖²] < [`LOW_SIGNAL_THRESHOLD`]; the ratio is then dominated
    /// by the small magnitude rather than by absolute spread.
    pub low_signal: bool,
}

fn relative_norm_spread(vectors: impl Iterator<Item = Vec<f64>>) -> EpistemicUncertainty {
    let norms: Vec<f64> = vectors.map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let std = (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let second = norms.iter().map(|v| v * v).sum::<f64>() / n;
    EpistemicUncertainty {
        sigma_epi: if second > 0.0 { std / second.sqrt() } else { 0.0 },
        second_moment: second,
        low_signal: second < LOW_SIGNAL_THRESHOLD,
    }
}

/// Normalized epistemic uncertainty of the drift at `x`.
pub fn epistemic_uncertainty(ens: &LbnEnsemble, x: &[f64]) -> EpistemicUncertainty {
    relative_norm_spread((0..ens.len()).map(|j| ens.member_drift(j, x).into_inner()))
}

/// The same ratio applied to the eigenvalue vectors of the member diffusions.
pub fn diffusion_epistemic_uncertainty(ens: &LbnEnsemble, x: &[f64]) -> Result<EpistemicUncertainty> {
    let eigs = (0..ens.len())
        .map(|j| sym_eigendecompose(ens.member_diffusion(j, x).as_matrix()).map(|e| e.values))
        .collect::<Result<Vec<_>>>()?;
    Ok(relative_norm_spread(eigs.into_iter()))
}
