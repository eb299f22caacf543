use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// k(x, x') = σ² exp(−½ Σ_j (x_j − x'_j)² / ℓ_j²).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqExpKernel {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl SqExpKernel {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) || lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument("kernel variance and lengthscales must be positive and finite".into()));
        }
        Ok(Self { variance, lengthscales })
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        let q: f64 = x.iter().zip(z).zip(&self.lengthscales).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
        self.variance * (-0.5 * q).exp()
    }

    /// k(x, z_m) for every m.
    pub fn cross(&self, x: &[f64], points: &[Vec<f64>]) -> Vec<f64> {
        points.iter().map(|z| self.eval(x, z)).collect()
    }

    /// K(Z, Z) + jitter I.
    pub fn gram(&self, points: &[Vec<f64>], jitter: f64) -> Matrix {
        let m = points.len();
        let mut k = Matrix::zeros(m, m);
        for a in 0..m {
            k[(a, a)] = self.variance + jitter;
            for b in 0..a {
                let v = self.eval(&points[a], &points[b]);
                k[(a, b)] = v;
                k[(b, a)] = v;
            }
        }
        k
    }

    /// ∂K(Z, Z)/∂η for η = log σ² (index 0) and log ℓ_j (index 1 + j).
    pub fn gram_hyper_derivative(&self, points: &[Vec<f64>], index: usize) -> Matrix {
        let m = points.len();
        let mut k = Matrix::zeros(m, m);
        for a in 0..m {
            for b in 0..=a {
                let v = self.eval(&points[a], &points[b]) * self.hyper_factor(&points[a], &points[b], index);
                k[(a, b)] = v;
                k[(b, a)] = v;
            }
        }
        k
    }

    /// (∂k/∂η) / k for the log-hyperparameter `index`.
    pub fn hyper_factor(&self, x: &[f64], z: &[f64], index: usize) -> f64 {
        match index {
            0 => 1.0,
            j => {
                let l = self.lengthscales[j - 1];
                ((x[j - 1] - z[j - 1]) / l).powi(2)
            }
        }
    }

    /// Number of log-hyperparameters: variance plus one lengthscale per dimension.
    pub fn hyper_count(&self) -> usize {
        1 + self.dim()
    }
}
