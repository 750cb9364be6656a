//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{normal, Rng};

/// Thin QR orthonormalization with deterministic column signs: the first
/// entry of each column whose magnitude exceeds 1e-12 is made positive.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    assert!(rows >= cols, "orthonormalize needs a tall matrix");
    let mut q = m.clone().qr().q();
    for j in 0..cols {
        let mut col = q.column_mut(j);
        if let Some(first) = col.iter().copied().find(|v| v.abs() > 1e-12) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    q
}

pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // column-major fill order is part of the determinism contract
    DMatrix::from_fn(rows, cols, |_, _| std * normal(rng))
}

pub fn gaussian_vector(rng: &mut Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// Uniform draw from the unit sphere in `R^n`.
pub fn unit_vector(rng: &mut Rng, n: usize) -> DVector<f64> {
    loop {
        let g = gaussian_vector(rng, n);
        let norm = g.norm();
        if norm > 1e-12 {
            return g / norm;
        }
    }
}

/// Orthonormal basis of the orthogonal complement of `col(m)`.
pub fn complement_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = m.shape();
    let q = orthonormalize(m);
    let proj = DMatrix::identity(d, d) - &q * q.transpose();
    // eigenvectors of the complement projector with eigenvalue one
    let eig = proj.symmetric_eigen();
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let cols: Vec<DVector<f64>> = idx[..d - k].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    orthonormalize(&DMatrix::from_columns(&cols))
}

/// Minimum-norm least-squares solution of `x * theta ≈ y` via the SVD.
pub fn min_norm_lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    svd.solve(y, tol).expect("svd computed with both factors")
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sigma.clone().cholesky().map(|c| c.l()).ok_or_else(|| invalid("covariance is not positive definite"))
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, m);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Row-major matrix document used by every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixData {
    fn from(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)]);
            }
        }
        MatrixData { rows, cols, data }
    }
}

impl MatrixData {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}
