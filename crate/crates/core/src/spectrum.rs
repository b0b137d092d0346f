//! Data covariance `G = U Λ U^T`.
//!
//! Only the eigenvalues and the (optional) rotation are stored. Every closed
//! form downstream goes through [`Covariance::sketch_root`] and
//! [`Covariance::root_coords`], which expose `R U Λ^{1/2}` and
//! `Λ^{1/2} U^T W`; a dense `G` is only built for oracle checks.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::max_abs;
use crate::rng;

const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Covariance {
    eigenvalues: Vec<f64>,
    rotation: Option<DMatrix<f64>>,
}

impl Covariance {
    /// `λ_i = scale · i^{-a}` for `i = 1..=d`.
    ///
    /// `a ≤ 1` is rejected: the trace of such a spectrum diverges as `d`
    /// grows.
    pub fn power_law(d: usize, a: f64, scale: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("power law needs d >= 1"));
        }
        if !(a > 1.0) || !a.is_finite() {
            return Err(Error::invalid(format!("power-law exponent must exceed 1, got {a}")));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        let eigenvalues = (1..=d).map(|i| scale * (i as f64).powf(-a)).collect();
        Ok(Covariance {
            eigenvalues,
            rotation: None,
        })
    }

    /// Diagonal covariance from an explicit eigenvalue list.
    pub fn from_eigenvalues(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::invalid("covariance needs at least one eigenvalue"));
        }
        if eigenvalues.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("eigenvalues must be finite and non-negative"));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("eigenvalues must be sorted non-increasing"));
        }
        let trace: f64 = eigenvalues.iter().sum();
        if !(trace > 0.0) {
            return Err(Error::invalid("covariance trace must be positive"));
        }
        Ok(Covariance {
            eigenvalues,
            rotation: None,
        })
    }

    /// Attach an orthonormal basis, turning `Λ` into `U Λ U^T`.
    pub fn with_rotation(mut self, u: DMatrix<f64>) -> Result<Self> {
        let d = self.dim();
        if u.nrows() != d || u.ncols() != d {
            return Err(Error::dims("Covariance::with_rotation", format!("{d}x{d}"), format!("{}x{}", u.nrows(), u.ncols())));
        }
        let defect = max_abs(&(u.transpose() * &u - DMatrix::identity(d, d)));
        if defect > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!("rotation is not orthonormal (defect {defect:.3e})")));
        }
        self.rotation = Some(u);
        Ok(self)
    }

    pub fn rotated(self, seed: u64) -> Result<Self> {
        let u = random_rotation(self.dim(), seed)?;
        self.with_rotation(u)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn rotation(&self) -> Option<&DMatrix<f64>> {
        self.rotation.as_ref()
    }

    pub fn is_diagonal(&self) -> bool {
        self.rotation.is_none()
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Sum of the eigenvalues past index `k` (zero-based), i.e. `Σ_{i>k} λ_i`.
    pub fn tail_sum(&self, k: usize) -> f64 {
        self.eigenvalues.iter().skip(k).sum()
    }

    /// `G^{1/2} v`.
    pub fn apply_sqrt(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::dims("Covariance::apply_sqrt", self.dim(), v.len()));
        }
        let roots = DVector::from_iterator(self.dim(), self.eigenvalues.iter().map(|l| l.sqrt()));
        Ok(match &self.rotation {
            None => v.component_mul(&roots),
            Some(u) => u * (u.tr_mul(v)).component_mul(&roots),
        })
    }

    /// Dense `G`. Oracle-scale only.
    pub fn dense(&self) -> DMatrix<f64> {
        self.dense_with(|l| l)
    }

    /// Dense `G^{1/2}`. Oracle-scale only.
    pub fn dense_sqrt(&self) -> DMatrix<f64> {
        self.dense_with(f64::sqrt)
    }

    fn dense_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let diag = DMatrix::from_diagonal(&DVector::from_iterator(self.dim(), self.eigenvalues.iter().map(|&l| f(l))));
        match &self.rotation {
            None => diag,
            Some(u) => u * diag * u.transpose(),
        }
    }

    /// `B = R U Λ^{1/2}`, so that `R G R^T = B B^T` and `R G W = B (Λ^{1/2} U^T W)`.
    pub fn sketch_root(&self, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if r.ncols() != self.dim() {
            return Err(Error::dims("Covariance::sketch_root", format!("{} columns", self.dim()), format!("{} columns", r.ncols())));
        }
        let mut b = match &self.rotation {
            None => r.clone(),
            Some(u) => r * u,
        };
        for (mut col, l) in b.column_iter_mut().zip(&self.eigenvalues) {
            col *= l.sqrt();
        }
        Ok(b)
    }

    /// `Λ^{1/2} U^T W`; its squared Frobenius norm is `‖W‖_G^2`.
    pub fn root_coords(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if w.nrows() != self.dim() {
            return Err(Error::dims("Covariance::root_coords", format!("{} rows", self.dim()), format!("{} rows", w.nrows())));
        }
        let mut c = match &self.rotation {
            None => w.clone(),
            Some(u) => u.tr_mul(w),
        };
        for (mut row, l) in c.row_iter_mut().zip(&self.eigenvalues) {
            row *= l.sqrt();
        }
        Ok(c)
    }

    /// `‖W‖_G^2 = tr(W^T G W)`.
    pub fn norm2(&self, w: &DMatrix<f64>) -> Result<f64> {
        Ok(crate::linalg::frob2(&self.root_coords(w)?))
    }

    /// Draw `x ~ N(0, G)`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        self.apply_sqrt(&xi).expect("dimension matches by construction")
    }
}

/// Haar-distributed orthonormal matrix: QR of a standard Gaussian draw with
/// the signs of `diag(R)` folded into `Q`.
pub fn random_rotation(d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::invalid("rotation needs d >= 1"));
    }
    let mut rng = rng::seeded(seed);
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law_small_cases() {
        let g = Covariance::power_law(3, 2.0, 1.0).unwrap();
        assert_eq!(g.eigenvalues(), &[1.0, 0.25, 1.0 / 9.0]);
        let g = Covariance::power_law(1, 5.0, 2.0).unwrap();
        assert_eq!(g.eigenvalues(), &[2.0]);
        assert!(g.is_diagonal());
    }

    #[test]
    fn power_law_trace_matches_partial_sum() {
        // Σ_{i≤4096} i^{-2}, summed smallest-first
        let exact: f64 = (1..=4096).rev().map(|i| 1.0 / (i as f64 * i as f64)).sum();
        assert!((exact - 1.64469).abs() / 1.64469 < 1e-3);
        let g = Covariance::power_law(4096, 2.0, 1.0).unwrap();
        assert!((g.trace() - 1.64469).abs() / 1.64469 < 1e-3);
        assert!((g.trace() - exact).abs() / exact < 1e-12);
    }

    #[test]
    fn power_law_rejects_bad_input() {
        assert!(Covariance::power_law(10, 1.0, 1.0).is_err());
        assert!(Covariance::power_law(10, 0.5, 1.0).is_err());
        assert!(Covariance::power_law(0, 2.0, 1.0).is_err());
        assert!(Covariance::power_law(10, 2.0, 0.0).is_err());
    }

    #[test]
    fn explicit_eigenvalues_validated() {
        assert!(Covariance::from_eigenvalues(vec![1.0, 2.0]).is_err());
        assert!(Covariance::from_eigenvalues(vec![1.0, -0.1]).is_err());
        assert!(Covariance::from_eigenvalues(vec![0.0, 0.0]).is_err());
        assert!(Covariance::from_eigenvalues(vec![]).is_err());
        assert!(Covariance::from_eigenvalues(vec![3.0, 3.0, 0.0]).is_ok());
    }

    #[test]
    fn apply_sqrt_examples() {
        let id = Covariance::from_eigenvalues(vec![1.0; 4]).unwrap();
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0, 5.0]);
        assert_eq!(id.apply_sqrt(&v).unwrap(), v);

        let g = Covariance::from_eigenvalues(vec![9.0, 4.0]).unwrap();
        let out = g.apply_sqrt(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 2.0]);

        assert!(g.apply_sqrt(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn apply_sqrt_rotated_matches_dense_product() {
        let d = 6;
        let g = Covariance::power_law(d, 1.7, 1.0).unwrap().rotated(7).unwrap();
        let u = g.rotation().unwrap().clone();
        // dense U Λ^{1/2} U^T assembled entry by entry
        let mut dense = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += u[(i, k)] * g.eigenvalues()[k].sqrt() * u[(j, k)];
                }
                dense[(i, j)] = s;
            }
        }
        let mut e1 = DVector::zeros(d);
        e1[0] = 1.0;
        let got = g.apply_sqrt(&e1).unwrap();
        for i in 0..d {
            assert!((got[i] - dense[(i, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_properties() {
        let u1 = random_rotation(1, 4).unwrap();
        assert_eq!(u1[(0, 0)].abs(), 1.0);
        let u = random_rotation(5, 3).unwrap();
        assert!(max_abs(&(u.transpose() * &u - DMatrix::identity(5, 5))) <= 1e-10);
        assert_eq!(u, random_rotation(5, 3).unwrap());
        assert!(random_rotation(0, 1).is_err());
    }

    #[test]
    fn trace_and_norm_are_rotation_invariant() {
        let g = Covariance::power_law(8, 2.0, 1.0).unwrap();
        let gr = g.clone().rotated(11).unwrap();
        assert!((g.trace() - gr.trace()).abs() <= 1e-12 * g.trace());
        assert!((gr.dense().trace() - g.trace()).abs() <= 1e-12 * g.trace());
        let w = DMatrix::from_fn(8, 2, |i, j| (i as f64 - j as f64) * 0.1);
        let dense = gr.dense();
        let direct = (w.transpose() * &dense * &w).trace();
        assert!((gr.norm2(&w).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn sketch_root_reproduces_gram() {
        let g = Covariance::power_law(7, 2.0, 1.0).unwrap().rotated(2).unwrap();
        let r = DMatrix::from_fn(3, 7, |i, j| ((i * 7 + j) as f64).sin());
        let b = g.sketch_root(&r).unwrap();
        let dense = &r * g.dense() * r.transpose();
        assert!(max_abs(&(&b * b.transpose() - dense)) < 1e-12);
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let g = Covariance::power_law(2, 2.0, 1.0).unwrap();
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(g.with_rotation(bad).is_err());
    }
}
