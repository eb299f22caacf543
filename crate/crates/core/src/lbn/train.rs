use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::statespace::LatentPanel;
use crate::types::StateVector;

use super::mlp::{MlpShape, Tape};
use super::swag::SwagState;
use super::{diffusion_loss_grad, tri_len, Standardizer};

/// One Kramers–Moyal training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmPair {
    /// Index into [`KmDataset::unit_ids`].
    pub unit: usize,
    pub x: StateVector,
    /// Δx / Δt.
    pub drift_target: Vec<f64>,
    /// Lower-triangular entries of Δx Δxᵀ / (2 Δt).
    pub diffusion_target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmDataset {
    pub dim: usize,
    pub unit_ids: Vec<String>,
    pub pairs: Vec<KmPair>,
    /// Transitions skipped because they span a gap.
    pub excluded_gap_transitions: usize,
}

/// Training pairs from every gap-free transition, with per-pair Δt in
/// simulation time.
pub fn km_targets(panel: &LatentPanel) -> Result<KmDataset> {
    let d = panel.dim;
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for (u, unit) in panel.units.iter().enumerate() {
        for tr in unit.transitions() {
            if tr.spans_gap {
                excluded += 1;
                continue;
            }
            let dx: Vec<f64> = (0..d).map(|i| tr.to[i] - tr.from[i]).collect();
            let mut second = Vec::with_capacity(tri_len(d));
            for i in 0..d {
                for j in 0..=i {
                    second.push(dx[i] * dx[j] / (2.0 * tr.dt));
                }
            }
            pairs.push(KmPair {
                unit: u,
                x: tr.from.clone(),
                drift_target: dx.iter().map(|v| v / tr.dt).collect(),
                diffusion_target: second,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no gap-free transitions".into()));
    }
    Ok(KmDataset {
        dim: d,
        unit_ids: panel.units.iter().map(|u| u.unit_id.clone()).collect(),
        pairs,
        excluded_gap_transitions: excluded,
    })
}

/// Fixed input and output scalings shared by all members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input: Standardizer,
    pub drift_output: Standardizer,
    /// Mean diagonal diffusion target; the diffusion head works in these units.
    pub diffusion_scale: f64,
}

impl Normalization {
    pub fn from_dataset(data: &KmDataset) -> Self {
        let d = data.dim;
        let input = Standardizer::fit(data.pairs.iter().map(|p| &p.x[..]), d);
        let drift_output = Standardizer::fit(data.pairs.iter().map(|p| &p.drift_target[..]), d);
        let n = data.pairs.len() as f64;
        let diag: Vec<usize> = (0..d).map(|i| i * (i + 1) / 2 + i).collect();
        let mean_diag =
            data.pairs.iter().map(|p| diag.iter().map(|&k| p.diffusion_target[k]).sum::<f64>()).sum::<f64>()
                / (n * d as f64);
        let diffusion_scale = if mean_diag.is_finite() && mean_diag > 1e-300 { mean_diag } else { 1.0 };
        Self { input, drift_output, diffusion_scale }
    }
}

/// Which conditional moment a network regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Drift,
    Diffusion,
}

impl Head {
    pub fn shape(&self, dim: usize, hidden: &[usize]) -> MlpShape {
        let out = match self {
            Head::Drift => dim,
            Head::Diffusion => tri_len(dim),
        };
        MlpShape::new(dim, hidden.to_vec(), out)
    }
}

/// Hyperparameters of the estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbnConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// SWA starts once validation loss has not improved by more than
    /// `swa_tolerance` (relative) for `swa_patience` epochs.
    pub swa_patience: usize,
    pub swa_tolerance: f64,
    /// Snapshots collected per fold, one per epoch.
    pub swa_epochs: usize,
    pub folds: usize,
    pub ensemble_size: usize,
}

impl Default for LbnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 500,
            swa_patience: 20,
            swa_tolerance: 1e-3,
            swa_epochs: 20,
            folds: 5,
            ensemble_size: 30,
        }
    }
}

impl LbnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.swa_epochs == 0 || self.folds == 0 {
            return bad("batch size, SWA epochs and folds must be positive");
        }
        if self.max_epochs <= self.swa_epochs {
            return bad("max_epochs must exceed swa_epochs");
        }
        if self.ensemble_size == 0 || self.ensemble_size % self.folds != 0 {
            return bad("ensemble size must be a positive multiple of the fold count");
        }
        Ok(())
    }
}

/// Units held out for validation in one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub index: usize,
    pub train_units: Vec<usize>,
    pub val_units: Vec<usize>,
}

/// Unit-wise k-fold split: units are shuffled with `seed` and dealt round-robin.
/// With a single fold the training units double as validation units.
pub fn fold_split(n_units: usize, k: usize, seed: StreamKey) -> Result<Vec<FoldSpec>> {
    if k == 0 {
        return Err(Error::InvalidArgument("fold count must be positive".into()));
    }
    if k == 1 {
        let all: Vec<usize> = (0..n_units).collect();
        return Ok(vec![FoldSpec { index: 0, train_units: all.clone(), val_units: all }]);
    }
    if n_units < k {
        return Err(Error::InsufficientData(format!("{n_units} units for a {k}-fold split")));
    }
    let mut order: Vec<usize> = (0..n_units).collect();
    seed.stream().shuffle(&mut order);
    Ok((0..k)
        .map(|f| {
            let mut val: Vec<usize> = order.iter().skip(f).step_by(k).copied().collect();
            val.sort_unstable();
            let train = (0..n_units).filter(|u| !val.contains(u)).collect();
            FoldSpec { index: f, train_units: train, val_units: val }
        })
        .collect())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// θ ← θ − lr · m̂ / (√v̂ + eps) for a gradient of the loss to minimize.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Loss ½ ⟨‖y − ŷ‖²⟩ in normalized units over `pairs`, and its gradient.
pub fn loss_and_gradient(
    shape: &MlpShape,
    params: &[f64],
    head: Head,
    pairs: &[&KmPair],
    norm: &Normalization,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let mut tape = Tape::default();
    let loss = accumulate(shape, params, head, pairs, norm, &mut tape, Some(&mut grad))?;
    let n = pairs.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss, grad))
}

fn accumulate(
    shape: &MlpShape,
    params: &[f64],
    head: Head,
    pairs: &[&KmPair],
    norm: &Normalization,
    tape: &mut Tape,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<f64> {
    let d = shape.input;
    let mut total = 0.0;
    for p in pairs {
        let z = norm.input.apply(&p.x);
        shape.forward_tape(params, &z, tape);
        let out = tape.output();
        let (loss, g_out) = match head {
            Head::Drift => {
                let target = norm.drift_output.apply(&p.drift_target);
                let e: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
                (0.5 * e.iter().map(|v| v * v).sum::<f64>(), e)
            }
            Head::Diffusion => diffusion_loss_grad(out, &p.diffusion_target, d, norm.diffusion_scale)
                .unwrap_or((f64::NAN, vec![0.0; out.len()])),
        };
        total += loss;
        if let Some(g) = grad.as_deref_mut() {
            shape.backward(params, tape, &g_out, g);
        }
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Loss curves and SWA bookkeeping of one fold and head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub fold: usize,
    pub head: Head,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// First epoch whose end-of-epoch parameters entered the SWA moments.
    pub swa_start_epoch: usize,
    /// True when the plateau rule never fired and SWA was started to fit
    /// within `max_epochs`.
    pub swa_forced: bool,
}

/// Trains one head on the training units of `fold` and returns its SWAG moments.
pub fn train_fold(
    data: &KmDataset,
    fold: &FoldSpec,
    head: Head,
    norm: &Normalization,
    config: &LbnConfig,
    seed: StreamKey,
) -> Result<(SwagState, FoldLog)> {
    config.validate()?;
    let in_set = |units: &[usize]| -> Vec<&KmPair> { data.pairs.iter().filter(|p| units.contains(&p.unit)).collect() };
    let train = in_set(&fold.train_units);
    let val = in_set(&fold.val_units);
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData(format!("fold {} has an empty training or validation set", fold.index)));
    }
    let shape = head.shape(data.dim, &config.hidden);
    let mut rng = seed.child_named("init").stream();
    let mut params = shape.init(&mut rng);
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut swag = SwagState::new(params.len());
    let mut tape = Tape::default();
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = FoldLog {
        fold: fold.index,
        head,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        swa_start_epoch: 0,
        swa_forced: false,
    };
    let mut best = f64::INFINITY;
    let mut last_improvement = 0;
    let mut swa_started = false;
    let mut batch: Vec<&KmPair> = Vec::with_capacity(config.batch_size);
    let mut shuffle = seed.child_named("shuffle").stream();

    for epoch in 0..config.max_epochs {
        shuffle.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = accumulate(&shape, &params, head, &batch, norm, &mut tape, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, learning_rate: config.learning_rate });
            }
            let n = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= n);
            adam.step(&mut params, &grad);
            epoch_loss += loss * n;
        }
        let val_loss = accumulate(&shape, &params, head, &val, norm, &mut tape, None)?;
        if !val_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch, learning_rate: config.learning_rate });
        }
        log.train_loss.push(epoch_loss / train.len() as f64);
        log.val_loss.push(val_loss);

        if swa_started {
            swag.collect(&params);
            if swag.count >= config.swa_epochs {
                break;
            }
            continue;
        }
        if val_loss < best * (1.0 - config.swa_tolerance) {
            best = val_loss;
            last_improvement = epoch;
        }
        let remaining = config.max_epochs - epoch - 1;
        if epoch - last_improvement >= config.swa_patience || remaining <= config.swa_epochs {
            swa_started = true;
            log.swa_forced = epoch - last_improvement < config.swa_patience;
            log.swa_start_epoch = epoch + 1;
        }
    }
    if swag.count == 0 {
        swag.collect(&params);
    }
    Ok((swag, log))
}
