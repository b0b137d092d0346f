//! Small dense kernels shared by the closed forms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition estimate above which a symmetric positive-definite system is
/// treated as singular.
pub const CONDITION_GUARD: f64 = 1e12;

/// Cholesky factorization of a symmetric positive-definite matrix, together
/// with a cheap condition estimate `(max L_ii / min L_ii)^2`.
///
/// The estimate is a lower bound on the 2-norm condition number; it catches
/// the near-singular Gram matrices that show up when `m` approaches the
/// numerical rank of `G`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    condition: f64,
}

impl SpdFactor {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::dims("SpdFactor::new", "square matrix", format!("{}x{}", a.nrows(), a.ncols())));
        }
        let chol = Cholesky::new(a.clone()).ok_or(Error::IllConditioned {
            condition: f64::INFINITY,
        })?;
        let diag = chol.l_dirty().diagonal();
        let max = diag.iter().cloned().fold(0.0_f64, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let condition = if min > 0.0 { (max / min).powi(2) } else { f64::INFINITY };
        if !condition.is_finite() || condition > CONDITION_GUARD {
            return Err(Error::IllConditioned { condition });
        }
        Ok(SpdFactor { chol, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} b`, so that `‖L^{-1} b‖_F^2 = tr(b^T A^{-1} b)`.
    pub fn whiten(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.chol.l();
        l.solve_lower_triangular(b)
            .expect("cholesky factor has a non-zero diagonal")
    }
}

/// Lower-triangular factor `L` with `L L^T = a` for a positive
/// *semi*definite `a`.
///
/// Pivots within `1e-10 * max diag` of zero are treated as exact zeros and
/// their column is dropped, so rank-deficient joint covariances (zero noise,
/// zero signal) still factor. A pivot below `-1e-8 * max diag` means the
/// input is not PSD.
pub fn psd_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::dims("psd_cholesky", "square matrix", format!("{}x{}", n, a.ncols())));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max);
    let mut l = DMatrix::<f64>::zeros(n, n);
    if scale == 0.0 {
        return Ok(l);
    }
    let zero_tol = 1e-10 * scale;
    let neg_tol = 1e-8 * scale;
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot < -neg_tol {
            return Err(Error::NotPositiveSemidefinite { pivot: j, value: pivot });
        }
        if pivot <= zero_tol {
            continue;
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Symmetric eigendecomposition with eigenvalues in non-increasing order.
pub fn symmetric_eigen_desc(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-15, 100 * n.max(10)).ok_or(Error::EigenFailure)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut basis = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        basis.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, basis))
}

pub fn frob2(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Lower-triangular matrix packed row by row, used on the sampling hot path.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedLower {
    n: usize,
    data: Vec<f64>,
}

impl PackedLower {
    pub fn from_lower(l: &DMatrix<f64>) -> Self {
        let n = l.nrows();
        let mut data = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                data.push(l[(i, j)]);
            }
        }
        PackedLower { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        let mut off = 0;
        for i in 0..self.n {
            for j in 0..=i {
                l[(i, j)] = self.data[off + j];
            }
            off += i + 1;
        }
        l
    }

    /// `out = L xi`.
    pub fn mul_into(&self, xi: &[f64], out: &mut [f64]) {
        debug_assert_eq!(xi.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        let mut off = 0;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[off..off + i + 1];
            *o = row.iter().zip(&xi[..=i]).map(|(a, b)| a * b).sum();
            off += i + 1;
        }
    }
}
