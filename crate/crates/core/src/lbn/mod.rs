//! Neural Kramers–Moyal estimator.
//!
//! Two block networks regress the first and second conditional moments of
//! observed displacements. Each fold of a unit-wise k-fold split yields a
//! diagonal SWAG posterior; members sampled from all folds form an
//! [`LbnEnsemble`], which is itself an [`SdeModel`](crate::SdeModel).

mod ensemble;
mod mlp;
mod swag;
mod train;

pub use ensemble::{
    diffusion_epistemic_uncertainty, ensemble_predict, epistemic_uncertainty, fit_lbn, EnsemblePrediction,
    EpistemicUncertainty, LbnEnsemble, MemberParams, LOW_SIGNAL_THRESHOLD,
};
pub use mlp::{Mlp, MlpShape, Tape};
pub use swag::{swag_sample, SwagState};
pub use train::{
    fold_split, km_targets, loss_and_gradient, train_fold, Adam, FoldLog, FoldSpec, Head, KmDataset, KmPair,
    LbnConfig, Normalization,
};

use serde::{Deserialize, Serialize};

use crate::linalg::{sym_eigendecompose, Matrix, PsdMatrix, SymEigen, EIGEN_FLOOR};
use crate::types::StateVector;

/// Per-coordinate affine map z = (x − mean) / std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Column means and standard deviations; zero spreads fall back to 1.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let rows: Vec<&[f64]> = rows.collect();
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let sd = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((z, m), s)| m + s * z).collect()
    }
}

/// Drift network F̂(x) = output⁻¹(net(input(x))).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftNet {
    pub net: Mlp,
    pub input: Standardizer,
    pub output: Standardizer,
}

impl DriftNet {
    pub fn forward(&self, x: &[f64]) -> StateVector {
        drift_eval(&self.net.shape, &self.net.params, &self.input, &self.output, x)
    }
}

/// Diffusion network: lower-triangular output, symmetrized, eigenvalues
/// mapped through `scale · softplus(λ) + ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffNet {
    pub net: Mlp,
    pub input: Standardizer,
    pub scale: f64,
}

/// D̂(x) for a diffusion network.
pub fn forward_diffusion(net: &DiffNet, x: &[f64]) -> PsdMatrix {
    diffusion_eval(&net.net.shape, &net.net.params, &net.input, net.scale, x)
}

pub(crate) fn drift_eval(
    shape: &MlpShape,
    params: &[f64],
    input: &Standardizer,
    output: &Standardizer,
    x: &[f64],
) -> StateVector {
    StateVector::new(output.invert(&shape.forward(params, &input.apply(x))))
}

pub(crate) fn diffusion_eval(shape: &MlpShape, params: &[f64], input: &Standardizer, scale: f64, x: &[f64]) -> PsdMatrix {
    let raw = shape.forward(params, &input.apply(x));
    let d = x.len();
    match rectify(&raw, d, EIGEN_FLOOR / scale) {
        Some((m, _)) => PsdMatrix::from_trusted(m.scaled(scale)),
        None => PsdMatrix::from_trusted(Matrix::from_row_slice(d, d, &vec![f64::NAN; d * d])),
    }
}

/// Number of lower-triangular entries of a d × d matrix.
pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Symmetric matrix from lower-triangular entries in row order
/// (0,0), (1,0), (1,1), (2,0), ...
pub fn lower_to_symmetric(lower: &[f64], d: usize) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            m[(i, j)] = lower[k];
            m[(j, i)] = lower[k];
            k += 1;
        }
    }
    m
}

/// Lower-triangular entries of a square matrix, in [`lower_to_symmetric`] order.
pub fn symmetric_to_lower(m: &Matrix) -> Vec<f64> {
    let d = m.rows();
    let mut out = Vec::with_capacity(tri_len(d));
    for i in 0..d {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// U diag(softplus(λ) + floor) Uᵀ for the symmetric matrix built from `raw`.
fn rectify(raw: &[f64], d: usize, floor: f64) -> Option<(Matrix, SymEigen)> {
    let s = lower_to_symmetric(raw, d);
    let eig = sym_eigendecompose(&s).ok()?;
    let m = eig.reconstruct_with(|l| softplus(l) + floor);
    Some((m, eig))
}

/// ½ Σ_{i≥j} (D̂_ij − y_ij)² in units of `scale`, and its gradient with
/// respect to the raw lower-triangular network output.
///
/// The eigenvalue map is differentiated with the divided-difference
/// (Daleckii–Krein) formula, falling back to the derivative for near-equal
/// eigenvalues.
pub(crate) fn diffusion_loss_grad(raw: &[f64], target_lower: &[f64], d: usize, scale: f64) -> Option<(f64, Vec<f64>)> {
    let floor = EIGEN_FLOOR / scale;
    let (m, eig) = rectify(raw, d, floor)?;
    let pred = symmetric_to_lower(&m);
    let mut loss = 0.0;
    let mut g = Matrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            let e = pred[k] - target_lower[k] / scale;
            loss += 0.5 * e * e;
            if i == j {
                g[(i, i)] = e;
            } else {
                g[(i, j)] = 0.5 * e;
                g[(j, i)] = 0.5 * e;
            }
            k += 1;
        }
    }
    let u = &eig.vectors;
    let inner = u.transpose().matmul(&g).matmul(u);
    let lam = &eig.values;
    let mut h = Matrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let diff = lam[a] - lam[b];
            let dd = if diff.abs() > 1e-6 * (1.0 + lam[a].abs()) {
                (softplus(lam[a]) - softplus(lam[b])) / diff
            } else {
                sigmoid(0.5 * (lam[a] + lam[b]))
            };
            h[(a, b)] = dd * inner[(a, b)];
        }
    }
    let grad_s = u.matmul(&h).matmul(&u.transpose());
    let mut out = Vec::with_capacity(tri_len(d));
    for i in 0..d {
        for j in 0..=i {
            out.push(if i == j { grad_s[(i, i)] } else { grad_s[(i, j)] + grad_s[(j, i)] });
        }
    }
    Some((loss, out))
}

/// Serde helper storing `Vec<f64>` as base64 of little-endian bytes.
pub mod params_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(values: &[f64]) -> String {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> Result<Vec<f64>, String> {
        let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!("{} bytes is not a whole number of f64 values", bytes.len()));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(values))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        decode(&text).map_err(serde::de::Error::custom)
    }
}
