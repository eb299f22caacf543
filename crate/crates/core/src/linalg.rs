//! Small dense linear algebra for the state dimensions used here (d ≤ ~20)
//! and inducing-point Gram matrices (M ≤ 64).

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue floor applied wherever a PSD matrix is inverted or square-rooted.
pub const EIGEN_FLOOR: f64 = 1e-9;

/// Eigenvalues below this are treated as a genuine PSD violation rather than round-off.
pub const PSD_TOLERANCE: f64 = 1e-8;

const SYMMETRY_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length does not match.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Self { rows, cols, data: data.to_vec() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.add(&other.scaled(-1.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest asymmetry |m_ij - m_ji| and where it occurs.
    pub fn symmetry_gap(&self) -> (usize, usize, f64) {
        let mut worst = (0, 0, 0.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let gap = (self[(i, j)] - self[(j, i)]).abs();
                if gap > worst.2 {
                    worst = (i, j, gap);
                }
            }
        }
        worst
    }

    fn check_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::Shape(format!("expected square matrix, got {}x{}", self.rows, self.cols)));
        }
        let (row, col, gap) = self.symmetry_gap();
        if gap > SYMMETRY_TOLERANCE * self.max_abs().max(1.0) || gap.is_nan() {
            return Err(Error::SymmetryViolation { row, col, gap });
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric positive semi-definite matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct PsdMatrix(Matrix);

impl PsdMatrix {
    /// Validates symmetry and that no eigenvalue lies below `-PSD_TOLERANCE`.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::DegenerateCovariance("non-finite entries".into()));
        }
        let eig = sym_eigendecompose(&m)?;
        let min = eig.values.last().copied().unwrap_or(0.0);
        if min < -PSD_TOLERANCE {
            return Err(Error::NotPsd { eigenvalue: min });
        }
        Ok(Self(m))
    }

    /// Wraps a matrix that is PSD by construction; symmetry is still enforced
    /// by averaging with the transpose.
    pub(crate) fn from_trusted(m: Matrix) -> Self {
        debug_assert!(m.is_square());
        let sym = m.add(&m.transpose()).scaled(0.5);
        Self(sym)
    }

    pub fn scalar_identity(dim: usize, value: f64) -> Self {
        assert!(value >= 0.0, "scalar must be nonnegative");
        Self(Matrix::identity(dim).scaled(value))
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_diag(values))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Nonnegative scaling keeps the matrix PSD.
    pub fn scaled(&self, s: f64) -> PsdMatrix {
        assert!(s >= 0.0, "negative scale of a PSD matrix");
        Self(self.0.scaled(s))
    }

    pub fn sum(&self, other: &PsdMatrix) -> PsdMatrix {
        Self(self.0.add(&other.0))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

impl TryFrom<Matrix> for PsdMatrix {
    type Error = Error;
    fn try_from(m: Matrix) -> Result<Self> {
        PsdMatrix::new(m)
    }
}

impl From<PsdMatrix> for Matrix {
    fn from(p: PsdMatrix) -> Matrix {
        p.0
    }
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: Matrix,
}

impl SymEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k)
    }

    /// U diag(f(λ)) Uᵀ.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for (k, &lk) in mapped.iter().enumerate() {
                    s += self.vectors[(i, k)] * lk * self.vectors[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Eigenvalues come back in descending order. Each eigenvector has its first
/// nonzero component made positive, and exact ties are ordered by
/// lexicographically larger eigenvector first, so the output is deterministic.
pub fn sym_eigendecompose(m: &Matrix) -> Result<SymEigen> {
    m.check_symmetric()?;
    let n = m.rows();
    let mut a = m.add(&m.transpose()).scaled(0.5);
    let mut v = Matrix::identity(n);
    let scale = a.max_abs();

    if scale > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[(p, q)] * a[(p, q)];
                }
            }
            if off.sqrt() <= 1e-15 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let app = a[(p, p)];
                    let aqq = a[(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|k| {
            let mut vec = v.column(k);
            if let Some(first) = vec.iter().copied().find(|x| x.abs() > 1e-14) {
                if first < 0.0 {
                    vec.iter_mut().for_each(|x| *x = -*x);
                }
            }
            (a[(k, k)], vec)
        })
        .collect();

    let tie = 1e-12 * scale.max(1.0);
    pairs.sort_by(|x, y| {
        if (x.0 - y.0).abs() <= tie {
            y.1.partial_cmp(&x.1).unwrap_or(std::cmp::Ordering::Equal)
        } else {
            y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal)
        }
    });

    let mut vectors = Matrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (k, (val, vec)) in pairs.into_iter().enumerate() {
        values.push(val);
        for (i, x) in vec.into_iter().enumerate() {
            vectors[(i, k)] = x;
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Symmetric square root of a PSD matrix, with eigenvalues floored at [`EIGEN_FLOOR`].
pub fn psd_sqrt(m: &PsdMatrix) -> Result<Matrix> {
    let eig = sym_eigendecompose(m.as_matrix())?;
    if let Some(&min) = eig.values.last() {
        if min < -PSD_TOLERANCE {
            return Err(Error::NotPsd { eigenvalue: min });
        }
    }
    Ok(eig.reconstruct_with(|l| l.max(EIGEN_FLOOR).sqrt()))
}

/// Inverse symmetric square root, with eigenvalues floored at [`EIGEN_FLOOR`].
pub fn psd_inv_sqrt(m: &PsdMatrix) -> Result<Matrix> {
    let eig = sym_eigendecompose(m.as_matrix())?;
    if let Some(&min) = eig.values.last() {
        if min < -PSD_TOLERANCE {
            return Err(Error::NotPsd { eigenvalue: min });
        }
    }
    Ok(eig.reconstruct_with(|l| 1.0 / l.max(EIGEN_FLOOR).sqrt()))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(m: &Matrix) -> Result<Self> {
        m.check_symmetric()?;
        let n = m.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::Conditioning { condition: f64::INFINITY });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    /// Crude condition estimate from the pivot ratio, (max L_ii / min L_ii)².
    pub fn condition_estimate(&self) -> f64 {
        let n = self.l.rows();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..n {
            lo = lo.min(self.l[(i, i)]);
            hi = hi.max(self.l[(i, i)]);
        }
        (hi / lo).powi(2)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.l.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.add(&inv.transpose()).scaled(0.5)
    }

    pub fn log_det(&self) -> f64 {
        (0..self.l.rows()).map(|i| 2.0 * self.l[(i, i)].ln()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruction_error(m: &Matrix, eig: &SymEigen) -> f64 {
        eig.reconstruct_with(|l| l).sub(m).max_abs() / m.max_abs().max(1.0)
    }

    fn orthonormality_error(u: &Matrix) -> f64 {
        u.transpose().matmul(u).sub(&Matrix::identity(u.rows())).max_abs()
    }

    #[test]
    fn identity_decomposes_to_unit_eigenvalues() {
        let eig = sym_eigendecompose(&Matrix::identity(2)).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0]);
        assert!(orthonormality_error(&eig.vectors) < 1e-12);
        // tie rule: lexicographically larger vector first
        assert_eq!(eig.vector(0), vec![1.0, 0.0]);
    }

    #[test]
    fn diagonal_eigenvalues_are_sorted_descending() {
        let eig = sym_eigendecompose(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(eig.values, vec![9.0, 4.0]);
        assert_eq!(eig.vector(0), vec![0.0, 1.0]);
    }

    #[test]
    fn random_symmetric_round_trip() {
        let m = Matrix::from_rows(&[
            vec![2.0, -0.7, 0.3],
            vec![-0.7, 1.1, 0.45],
            vec![0.3, 0.45, -0.6],
        ]);
        let eig = sym_eigendecompose(&m).unwrap();
        assert!(reconstruction_error(&m, &eig) < 1e-10);
        assert!(orthonormality_error(&eig.vectors) < 1e-10);
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]);
        assert!(matches!(sym_eigendecompose(&m), Err(Error::SymmetryViolation { .. })));
    }

    #[test]
    fn psd_sqrt_of_identity_and_diagonal() {
        let id = PsdMatrix::scalar_identity(3, 1.0);
        assert!(psd_sqrt(&id).unwrap().sub(&Matrix::identity(3)).max_abs() < 1e-15);
        let d = PsdMatrix::diag(&[4.0, 9.0]).unwrap();
        let r = psd_sqrt(&d).unwrap();
        assert!(r.sub(&Matrix::from_diag(&[2.0, 3.0])).max_abs() < 1e-14);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = PsdMatrix::new(Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]])).unwrap();
        let r = psd_sqrt(&m).unwrap();
        assert!(r.symmetry_gap().2 < 1e-15);
        assert!(r.matmul(&r).sub(m.as_matrix()).max_abs() < 1e-9);
    }

    #[test]
    fn inverse_sqrt_whitens() {
        let m = PsdMatrix::new(Matrix::from_rows(&[vec![2.0, 0.7], vec![0.7, 1.0]])).unwrap();
        let w = psd_inv_sqrt(&m).unwrap();
        assert!(w.matmul(m.as_matrix()).matmul(&w).sub(&Matrix::identity(2)).max_abs() < 1e-10);
    }

    #[test]
    fn psd_sqrt_clamps_tiny_eigenvalues() {
        let m = PsdMatrix::new(Matrix::zeros(1, 1)).unwrap();
        let r = psd_sqrt(&m).unwrap();
        assert!((r[(0, 0)] - EIGEN_FLOOR.sqrt()).abs() < 1e-18);
    }

    #[test]
    fn negative_eigenvalue_is_not_psd() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(PsdMatrix::new(m), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn cholesky_solves_and_inverts() {
        let m = Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]]);
        let ch = Cholesky::new(&m).unwrap();
        let b = vec![1.0, -2.0, 0.5];
        let x = ch.solve(&b);
        let back = m.mul_vec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(m.matmul(&ch.inverse()).sub(&Matrix::identity(3)).max_abs() < 1e-12);
        let eig = sym_eigendecompose(&m).unwrap();
        let logdet: f64 = eig.values.iter().map(|l| l.ln()).sum();
        assert!((ch.log_det() - logdet).abs() < 1e-12);
    }
}
