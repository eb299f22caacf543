//! The drift/diffusion abstraction shared by simulators, likelihoods and estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, PsdMatrix};
use crate::types::StateVector;

/// An Itô SDE dx = F(x) dt + √(2 D(x)) dW.
///
/// Both maps must be pure functions of the state.
pub trait SdeModel: Send + Sync {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64]) -> StateVector;

    fn diffusion(&self, x: &[f64]) -> PsdMatrix;

    /// ∂F_i/∂x_j. The default uses central differences.
    fn drift_jacobian(&self, x: &[f64]) -> Matrix {
        let d = self.dim();
        let mut jac = Matrix::zeros(d, d);
        let mut probe = x.to_vec();
        for j in 0..d {
            let h = 1e-5 * x[j].abs().max(1.0);
            probe[j] = x[j] + h;
            let up = self.drift(&probe);
            probe[j] = x[j] - h;
            let down = self.drift(&probe);
            probe[j] = x[j];
            for i in 0..d {
                jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
            }
        }
        jac
    }
}

impl<M: SdeModel + ?Sized> SdeModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn drift(&self, x: &[f64]) -> StateVector {
        (**self).drift(x)
    }
    fn diffusion(&self, x: &[f64]) -> PsdMatrix {
        (**self).diffusion(x)
    }
    fn drift_jacobian(&self, x: &[f64]) -> Matrix {
        (**self).drift_jacobian(x)
    }
}

/// Evaluates drift and diffusion and rejects non-finite output.
pub(crate) fn evaluate<M: SdeModel + ?Sized>(model: &M, x: &[f64]) -> Result<(StateVector, PsdMatrix)> {
    let f = model.drift(x);
    let d = model.diffusion(x);
    if !f.is_finite() || !d.as_matrix().is_finite() || f.dim() != model.dim() {
        return Err(Error::ModelEvaluation { x: x.to_vec() });
    }
    Ok((f, d))
}

/// Linear drift with constant diffusion: F(x) = A x + b, D(x) = D.
///
/// Covers Ornstein–Uhlenbeck (A = -θ I), constant drift (A = 0) and Brownian
/// motion (A = 0, b = 0). Used as a reference model with closed-form
/// transition densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSde {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub d: PsdMatrix,
}

impl LinearSde {
    pub fn new(a: Matrix, b: Vec<f64>, d: PsdMatrix) -> Result<Self> {
        let n = b.len();
        if a.rows() != n || a.cols() != n || d.dim() != n {
            return Err(Error::Shape("linear SDE blocks disagree on dimension".into()));
        }
        Ok(Self { a, b, d })
    }

    /// Isotropic Ornstein–Uhlenbeck process dx = -θ x dt + √(2D) dW.
    pub fn ornstein_uhlenbeck(dim: usize, theta: f64, diffusion: f64) -> Self {
        Self {
            a: Matrix::identity(dim).scaled(-theta),
            b: vec![0.0; dim],
            d: PsdMatrix::scalar_identity(dim, diffusion),
        }
    }

    /// Constant drift `f` with isotropic diffusion.
    pub fn constant_drift(f: Vec<f64>, diffusion: f64) -> Self {
        let n = f.len();
        Self { a: Matrix::zeros(n, n), b: f, d: PsdMatrix::scalar_identity(n, diffusion) }
    }

    pub fn brownian(dim: usize, diffusion: f64) -> Self {
        Self::constant_drift(vec![0.0; dim], diffusion)
    }
}

impl SdeModel for LinearSde {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn drift(&self, x: &[f64]) -> StateVector {
        let mut f = self.a.mul_vec(x);
        f.iter_mut().zip(&self.b).for_each(|(v, b)| *v += b);
        StateVector::new(f)
    }

    fn diffusion(&self, _x: &[f64]) -> PsdMatrix {
        self.d.clone()
    }

    fn drift_jacobian(&self, _x: &[f64]) -> Matrix {
        self.a.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;

    impl SdeModel for Quadratic {
        fn dim(&self) -> usize {
            2
        }
        fn drift(&self, x: &[f64]) -> StateVector {
            StateVector::new(vec![x[0] * x[1], x[0] * x[0]])
        }
        fn diffusion(&self, _x: &[f64]) -> PsdMatrix {
            PsdMatrix::scalar_identity(2, 1.0)
        }
    }

    #[test]
    fn finite_difference_jacobian() {
        let j = Quadratic.drift_jacobian(&[1.5, -2.0]);
        let expect = [[-2.0, 1.5], [3.0, 0.0]];
        for i in 0..2 {
            for k in 0..2 {
                assert!((j[(i, k)] - expect[i][k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ou_drift_is_linear() {
        let ou = LinearSde::ornstein_uhlenbeck(1, 1.0, 0.5);
        assert_eq!(ou.drift(&[2.0])[0], -2.0);
        assert_eq!(ou.diffusion(&[2.0]).get(0, 0), 0.5);
    }
}
