//! Independent reference routines.
//!
//! Everything here is deliberately naive (triple loops, Gaussian elimination,
//! explicit products) and shares no code with the production paths it is
//! used to check. Oracle scale only.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::sampling::{ParameterMatrix, SketchMatrix};
use crate::sgd::StepSchedule;
use crate::spectrum::Covariance;

pub fn naive_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "naive_mul shape mismatch");
    let mut c = DMatrix::zeros(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[(i, k)] * b[(k, j)];
            }
            c[(i, j)] = s;
        }
    }
    c
}

/// Solve `A X = B` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::dims("gauss_solve", format!("{n}x{n} system"), format!("{}x{} with rhs {} rows", a.nrows(), a.ncols(), b.nrows())));
    }
    let k = b.ncols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a[(i, j)]).chain((0..k).map(|j| b[(i, j)])).collect())
        .collect();
    let scale = aug.iter().flat_map(|r| r[..n].iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
            .unwrap();
        if aug[piv][col].abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::IllConditioned { condition: f64::INFINITY });
        }
        aug.swap(col, piv);
        for row in (col + 1)..n {
            let f = aug[row][col] / aug[col][col];
            if f != 0.0 {
                for j in col..(n + k) {
                    aug[row][j] -= f * aug[col][j];
                }
            }
        }
    }
    let mut x = DMatrix::zeros(n, k);
    for j in 0..k {
        for i in (0..n).rev() {
            let mut s = aug[i][n + j];
            for c in (i + 1)..n {
                s -= aug[i][c] * x[(c, j)];
            }
            x[(i, j)] = s / aug[i][i];
        }
    }
    Ok(x)
}

/// Projection form of the approximation error,
/// `‖(I − G^{1/2} R^T (R G R^T)^{-1} R G^{1/2}) G^{1/2} W*‖_F²`,
/// assembled as a dense `d × d` operator.
pub fn approx_projection(r: &SketchMatrix, g: &Covariance, w_star: &ParameterMatrix) -> Result<f64> {
    let d = g.dim();
    let half = g.dense_sqrt();
    let rh = naive_mul(r.matrix(), &half); // R G^{1/2}, m×d
    let gram = naive_mul(&rh, &rh.transpose());
    let inv_rh = gauss_solve(&gram, &rh)?; // (RGR^T)^{-1} R G^{1/2}
    let proj = naive_mul(&rh.transpose(), &inv_rh);
    let resid = naive_mul(&(DMatrix::identity(d, d) - proj), &naive_mul(&half, w_star.matrix()));
    Ok(resid.iter().map(|v| v * v).sum())
}

/// `‖∏_t (I − γ_t A)(V0 − V*)‖_A²` by applying every step explicitly.
pub fn bias_explicit_product(gram: &DMatrix<f64>, schedule: &StepSchedule, v0: &DMatrix<f64>, v_star: &DMatrix<f64>) -> f64 {
    let m = gram.nrows();
    let mut delta = v0 - v_star;
    for t in 1..=schedule.total_steps() {
        let gamma = schedule.gamma_at(t).expect("t within schedule");
        let step = DMatrix::identity(m, m) - gram * gamma;
        delta = naive_mul(&step, &delta);
    }
    naive_mul(&naive_mul(&delta.transpose(), gram), &delta).trace()
}

/// Eigenvalues of a small symmetric PSD matrix from its characteristic
/// polynomial (Faddeev–LeVerrier coefficients, roots by bisection between
/// sign changes on `[0, tr A]`). Returned non-increasing.
pub fn charpoly_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    // c[k] is the coefficient of λ^{n-k}; c[0] = 1.
    let mut c = vec![0.0; n + 1];
    c[0] = 1.0;
    let mut mk = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        let mut next = naive_mul(a, &mk);
        for i in 0..n {
            next[(i, i)] += c[k - 1];
        }
        mk = next;
        let am = naive_mul(a, &mk);
        c[k] = -am.trace() / k as f64;
    }
    let poly = |x: f64| c.iter().fold(0.0, |acc, &ck| acc * x + ck);
    let hi = a.trace().max(0.0) * (1.0 + 1e-9) + 1e-12;
    let steps = 20_000;
    let mut roots = Vec::new();
    let mut x0 = -1e-12 * hi.max(1.0);
    let mut f0 = poly(x0);
    for s in 1..=steps {
        let x1 = hi * s as f64 / steps as f64;
        let f1 = poly(x1);
        if f0 == 0.0 {
            roots.push(x0);
        } else if f0.signum() != f1.signum() && f1 != 0.0 {
            let (mut lo, mut up, mut flo) = (x0, x1, f0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + up);
                let fm = poly(mid);
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    up = mid;
                }
            }
            roots.push(0.5 * (lo + up));
        }
        x0 = x1;
        f0 = f1;
    }
    if f0 == 0.0 {
        roots.push(x0);
    }
    roots.sort_by(|a, b| b.total_cmp(a));
    roots
}

/// Monte Carlo estimate of `E[x x^T A x x^T]` for `x ~ N(0, G)` with
/// entrywise standard errors.
pub fn fourth_moment_monte_carlo<R: Rng + ?Sized>(g: &Covariance, a: &DMatrix<f64>, samples: usize, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = g.dim();
    let mut sum = DMatrix::<f64>::zeros(d, d);
    let mut sum_sq = DMatrix::<f64>::zeros(d, d);
    for _ in 0..samples {
        let x: DVector<f64> = g.sample(rng);
        let q = (x.transpose() * a * &x)[(0, 0)];
        for i in 0..d {
            for j in 0..d {
                let v = q * x[i] * x[j];
                sum[(i, j)] += v;
                sum_sq[(i, j)] += v * v;
            }
        }
    }
    let n = samples as f64;
    let mean = &sum / n;
    let stderr = DMatrix::from_fn(d, d, |i, j| {
        let var = (sum_sq[(i, j)] / n - mean[(i, j)].powi(2)) * n / (n - 1.0);
        (var.max(0.0) / n).sqrt()
    });
    (mean, stderr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;

    #[test]
    fn gauss_solve_small_system() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[3.0, 5.0]);
        let x = gauss_solve(&a, &b).unwrap();
        assert!(max_abs(&(x - DMatrix::from_row_slice(2, 1, &[0.8, 1.4]))) < 1e-14);
    }

    #[test]
    fn gauss_solve_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(gauss_solve(&a, &DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn charpoly_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 3.0, 1.25]));
        let e = charpoly_eigenvalues(&a);
        assert_eq!(e.len(), 3);
        for (got, want) in e.iter().zip([3.0, 1.25, 0.5]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}
