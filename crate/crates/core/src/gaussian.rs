use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eigendecompose, PsdMatrix, SymEigen, EIGEN_FLOOR, PSD_TOLERANCE};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Multivariate normal with a pre-factored covariance.
///
/// Covariance eigenvalues are floored at [`EIGEN_FLOOR`] before inversion.
#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: Vec<f64>,
    eig: SymEigen,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: &[f64], cov: &PsdMatrix) -> Result<Self> {
        if cov.dim() != mean.len() {
            return Err(Error::Shape(format!(
                "mean has dimension {} but covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if !cov.as_matrix().is_finite() || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::DegenerateCovariance("non-finite mean or covariance".into()));
        }
        let mut eig = sym_eigendecompose(cov.as_matrix())?;
        for l in eig.values.iter_mut() {
            if *l < -PSD_TOLERANCE {
                return Err(Error::NotPsd { eigenvalue: *l });
            }
            *l = l.max(EIGEN_FLOOR);
        }
        let d = mean.len() as f64;
        let log_det: f64 = eig.values.iter().map(|l| l.ln()).sum();
        if !log_det.is_finite() {
            return Err(Error::DegenerateCovariance(format!("log-determinant {log_det}")));
        }
        let log_norm = -0.5 * d * LN_2PI - 0.5 * log_det;
        Ok(Self { mean: mean.to_vec(), eig, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Residual expressed in the covariance eigenbasis, scaled to unit variance.
    pub fn whiten(&self, x: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        (0..self.dim())
            .map(|k| {
                let u = self.eig.vector(k);
                dot(&u, &r) / self.eig.values[k].sqrt()
            })
            .collect()
    }

    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut q = 0.0;
        for k in 0..d {
            let mut proj = 0.0;
            for i in 0..d {
                proj += self.eig.vectors[(i, k)] * (x[i] - self.mean[i]);
            }
            q += proj * proj / self.eig.values[k];
        }
        q
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(x)
    }

    /// Differential entropy ½ ln((2πe)^d det Σ), in nats.
    pub fn entropy(&self) -> f64 {
        -self.log_norm + 0.5 * self.dim() as f64
    }

    pub fn log_det(&self) -> f64 {
        self.eig.values.iter().map(|l| l.ln()).sum()
    }
}

/// log N(x | mean, cov), including the normalization constant.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], cov: &PsdMatrix) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(Error::Shape(format!("x has dimension {}, mean {}", x.len(), mean.len())));
    }
    Ok(Gaussian::new(mean, cov)?.logpdf(x))
}

/// Scalar normal log-density.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean).powi(2) / var
}
