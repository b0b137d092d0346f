//! Closed-form theory: sketched spectrum, bias, effective dimension,
//! scaling-law templates and Gaussian fourth-moment identities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, symmetric_eigen_desc};
use crate::regression::SketchedModel;
use crate::sampling::{ParameterMatrix, SketchMatrix};
use crate::sgd::StepSchedule;
use crate::spectrum::Covariance;

/// Eigendecomposition of `R G R^T`, eigenvalues non-increasing.
#[derive(Clone, Debug)]
pub struct SketchedSpectrum {
    values: DVector<f64>,
    basis: DMatrix<f64>,
}

impl SketchedSpectrum {
    pub fn from_gram(gram: &DMatrix<f64>) -> Result<Self> {
        if gram.nrows() != gram.ncols() {
            return Err(Error::dims("SketchedSpectrum::from_gram", "square", format!("{}x{}", gram.nrows(), gram.ncols())));
        }
        let (mut values, basis) = symmetric_eigen_desc(gram)?;
        // round-off negatives
        for v in values.iter_mut() {
            if *v < 0.0 {
                if *v < -1e-10 * gram.norm().max(1.0) {
                    return Err(Error::NotPositiveSemidefinite { pivot: 0, value: *v });
                }
                *v = 0.0;
            }
        }
        Ok(SketchedSpectrum { values, basis })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn top(&self) -> f64 {
        self.values.get(0).copied().unwrap_or(0.0)
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.basis * DMatrix::from_diagonal(&self.values) * self.basis.transpose()
    }

    /// `‖X‖²_{RGR^T}` through the eigenbasis.
    pub fn weighted_norm2(&self, x: &DMatrix<f64>) -> f64 {
        let rot = self.basis.tr_mul(x);
        rot.row_iter().zip(self.values.iter()).map(|(row, l)| l * row.norm_squared()).sum()
    }
}

pub fn sketched_eigs(r: &SketchMatrix, g: &Covariance) -> Result<SketchedSpectrum> {
    let root = g.sketch_root(r.matrix())?;
    SketchedSpectrum::from_gram(&(&root * root.transpose()))
}

/// Bias value plus a flag for `1 − γ_t λ̃_j ≤ 0` somewhere in the schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bias {
    pub value: f64,
    pub non_contraction: bool,
}

/// `‖∏_t (I − γ_t RGR^T)(V0 − V*)‖²_{RGR^T}` in the eigenbasis, with the
/// per-stage powers accumulated in log space.
pub fn bias_term(spec: &SketchedSpectrum, schedule: &StepSchedule, v0: &SketchedModel, v_star: &SketchedModel) -> Result<Bias> {
    if v0.matrix().shape() != v_star.matrix().shape() || v0.m() != spec.dim() {
        return Err(Error::dims("bias_term", format!("{} rows", spec.dim()), format!("V0 {:?}, V* {:?}", v0.matrix().shape(), v_star.matrix().shape())));
    }
    let rot = spec.basis().tr_mul(&(v0.matrix() - v_star.matrix()));
    let stages = schedule.stages();
    let mut non_contraction = false;
    let mut value = 0.0;
    for (j, &lam) in spec.values().iter().enumerate() {
        let weight = rot.row(j).norm_squared();
        if lam == 0.0 || weight == 0.0 {
            continue;
        }
        let mut log_sq = 0.0;
        let mut annihilated = false;
        for st in &stages {
            let f = 1.0 - st.gamma * lam;
            if f <= 0.0 {
                non_contraction = true;
            }
            if f == 0.0 {
                annihilated = true;
                break;
            }
            log_sq += 2.0 * st.len as f64 * f.abs().ln();
        }
        if !annihilated {
            value += lam * weight * log_sq.exp();
        }
    }
    Ok(Bias { value, non_contraction })
}

/// Effective dimension and variance term for threshold `1 / (N_eff γ)`.
/// Eigenvalues exactly at the threshold count toward the head.
pub fn variance_term(spec: &SketchedSpectrum, n_eff: f64, gamma: f64) -> Result<(f64, f64)> {
    if !(n_eff > 0.0) || !(gamma > 0.0) {
        return Err(Error::invalid(format!("N_eff and γ must be positive, got {n_eff}, {gamma}")));
    }
    let horizon = n_eff * gamma;
    let threshold = 1.0 / horizon;
    let mut head = 0usize;
    let mut tail = 0.0;
    for &l in spec.values().iter() {
        if l >= threshold {
            head += 1;
        } else {
            tail += l * l;
        }
    }
    let d_eff = head as f64 + horizon * horizon * tail;
    Ok((d_eff, d_eff / n_eff))
}

/// The three terms of the scaling law with unit constants. This is an
/// exponent template, not a calibrated prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPrediction {
    pub irreducible: f64,
    pub approx_term: f64,
    pub excess_term: f64,
    pub total: f64,
}

pub fn theoretical_scaling(m: f64, n_eff: f64, gamma: f64, a: f64, sigma2: f64) -> Result<ScalingPrediction> {
    if !(a > 1.0) {
        return Err(Error::invalid(format!("power-law exponent must exceed 1, got {a}")));
    }
    if !(m > 0.0) || !(n_eff * gamma > 0.0) {
        return Err(Error::invalid("m and N_eff γ must be positive"));
    }
    let approx_term = m.powf(1.0 - a);
    let excess_term = (n_eff * gamma).powf(-(a - 1.0) / a);
    Ok(ScalingPrediction {
        irreducible: sigma2,
        approx_term,
        excess_term,
        total: sigma2 + approx_term + excess_term,
    })
}

/// `(‖W*‖_G² + ‖V0‖²_{RGR^T}) / σ²`.
pub fn noise_ratio(w_star: &ParameterMatrix, g: &Covariance, v0: &SketchedModel, spec: &SketchedSpectrum, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("noise ratio needs σ² > 0"));
    }
    Ok((g.norm2(w_star.matrix())? + spec.weighted_norm2(v0.matrix())) / sigma2)
}

/// Bias, effective dimension, variance and their combination for one
/// trained configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub bias: f64,
    pub d_eff: f64,
    pub variance: f64,
    pub prediction: f64,
    pub rnr: f64,
    pub non_contraction: bool,
}

pub fn theory_report(
    spec: &SketchedSpectrum,
    schedule: &StepSchedule,
    v0: &SketchedModel,
    v_star: &SketchedModel,
    signal: f64,
    sigma2: f64,
) -> Result<TheoryReport> {
    let bias = bias_term(spec, schedule, v0, v_star)?;
    let n_eff = schedule.n_eff();
    let (d_eff, variance) = if n_eff > 0.0 {
        variance_term(spec, n_eff, schedule.gamma0())?
    } else {
        (0.0, 0.0)
    };
    let rnr = if sigma2 > 0.0 {
        (signal + spec.weighted_norm2(v0.matrix())) / sigma2
    } else {
        f64::INFINITY
    };
    Ok(TheoryReport {
        bias: bias.value,
        d_eff,
        variance,
        prediction: bias.value + sigma2 * variance,
        rnr,
        non_contraction: bias.non_contraction,
    })
}

/// `E[x x^T A x x^T] = tr(GA)·G + 2·G A G` for `x ~ N(0, G)`.
pub fn isserlis_fourth_moment(g: &Covariance, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = g.dim();
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::dims("isserlis_fourth_moment", format!("{d}x{d}"), format!("{}x{}", a.nrows(), a.ncols())));
    }
    let gd = g.dense();
    let ga = &gd * a;
    Ok(&gd * ga.trace() + (&ga * &gd) * 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypercontractivityCheck {
    pub passed: bool,
    /// Smallest eigenvalue of `α·tr(GA)·G − E[x x^T A x x^T]`; negative
    /// values measure the violation.
    pub min_eigenvalue: f64,
}

/// Checks `E[x x^T A x x^T] ⪯ α·tr(GA)·G` using the closed-form fourth
/// moment.
pub fn hypercontractivity_check(g: &Covariance, a: &DMatrix<f64>, alpha: f64) -> Result<HypercontractivityCheck> {
    let moment = isserlis_fourth_moment(g, a)?;
    let gd = g.dense();
    let tr = (&gd * a).trace();
    let gap = &gd * (alpha * tr) - moment;
    let (vals, _) = symmetric_eigen_desc(&gap)?;
    let min_eigenvalue = vals[vals.len() - 1];
    let scale = max_abs(&gap).max(1.0);
    Ok(HypercontractivityCheck {
        passed: min_eigenvalue >= -1e-10 * scale,
        min_eigenvalue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::regression::SketchSystem;
    use crate::rng;

    fn diag_spec(vals: &[f64]) -> SketchedSpectrum {
        SketchedSpectrum::from_gram(&DMatrix::from_diagonal(&DVector::from_column_slice(vals))).unwrap()
    }

    #[test]
    fn single_eigenvalue() {
        let s = diag_spec(&[2.5]);
        assert_eq!(s.values().as_slice(), &[2.5]);
    }

    #[test]
    fn identity_sketch_reproduces_spectrum() {
        let g = Covariance::power_law(6, 2.0, 1.0).unwrap();
        let s = sketched_eigs(&SketchMatrix::identity(6), &g).unwrap();
        for (a, b) in s.values().iter().zip(g.eigenvalues()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn eigs_match_charpoly_oracle() {
        let g = Covariance::power_law(6, 2.0, 1.0).unwrap();
        let r = SketchMatrix::draw(3, 6, 8).unwrap();
        let s = sketched_eigs(&r, &g).unwrap();
        let dense = oracle::naive_mul(&oracle::naive_mul(r.matrix(), &g.dense()), &r.matrix().transpose());
        let roots = oracle::charpoly_eigenvalues(&dense);
        assert_eq!(roots.len(), 3);
        for (a, b) in s.values().iter().zip(&roots) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(max_abs(&(s.reconstruct() - dense)) <= 1e-8 * s.top());
    }

    #[test]
    fn bias_with_no_steps_is_initial_distance() {
        let spec = diag_spec(&[1.0, 0.3]);
        let v0 = SketchedModel::from_matrix(DMatrix::from_row_slice(2, 1, &[1.0, 2.0]));
        let vs = SketchedModel::zeros(2, 1);
        let s = StepSchedule::constant(0.1, 0).unwrap();
        let b = bias_term(&spec, &s, &v0, &vs).unwrap();
        assert!((b.value - (1.0 + 0.3 * 4.0)).abs() < 1e-14);
    }

    #[test]
    fn bias_exact_annihilation() {
        let spec = diag_spec(&[2.0]);
        let vs = SketchedModel::from_matrix(DMatrix::from_element(1, 1, 3.0));
        let s = StepSchedule::constant(0.5, 1).unwrap();
        let b = bias_term(&spec, &s, &SketchedModel::zeros(1, 1), &vs).unwrap();
        assert_eq!(b.value, 0.0);
        assert!(b.non_contraction);
    }

    #[test]
    fn bias_matches_explicit_product() {
        let g = Covariance::power_law(10, 2.0, 1.0).unwrap();
        let r = SketchMatrix::draw(4, 10, 21).unwrap();
        let w = ParameterMatrix::draw(10, 2, 22).unwrap();
        let sys = SketchSystem::new(&r, &g, &w).unwrap();
        let spec = SketchedSpectrum::from_gram(sys.gram()).unwrap();
        let v_star = sys.optimal();
        let v0 = SketchedModel::from_matrix(DMatrix::from_fn(4, 2, |i, j| 0.1 * (i + j) as f64));
        let gamma = 1.0 / (2.0 * sys.gram_trace());
        let s = StepSchedule::step_decay(gamma, 37).unwrap();
        let b = bias_term(&spec, &s, &v0, &v_star).unwrap();
        let oracle = oracle::bias_explicit_product(sys.gram(), &s, v0.matrix(), v_star.matrix());
        assert!((b.value - oracle).abs() <= 1e-9 * oracle, "{} vs {oracle}", b.value);
        assert!(!b.non_contraction);
    }

    #[test]
    fn variance_examples() {
        let s = diag_spec(&[1.0, 0.5, 0.01]);
        let (d_eff, var) = variance_term(&s, 2.0, 2.0).unwrap();
        assert!((d_eff - 2.0016).abs() < 1e-12);
        assert!((var - 2.0016 / 2.0).abs() < 1e-12);

        let (d_eff, var) = variance_term(&s, 1000.0, 1.0).unwrap();
        assert_eq!(d_eff, 3.0);
        assert_eq!(var, 3.0 / 1000.0);

        let (d_eff, _) = variance_term(&s, 0.5, 1.0).unwrap();
        assert!((d_eff - 0.25 * (1.0 + 0.25 + 1e-4)).abs() < 1e-12);

        // tie at the threshold counts as head
        let (d_eff, _) = variance_term(&diag_spec(&[0.25]), 4.0, 1.0).unwrap();
        assert_eq!(d_eff, 1.0);
        assert!(variance_term(&s, 0.0, 1.0).is_err());
    }

    #[test]
    fn scaling_examples() {
        let p = theoretical_scaling(100.0, 100.0, 1.0, 2.0, 1.0).unwrap();
        assert!((p.total - 1.11).abs() < 1e-12);
        let p = theoretical_scaling(1e12, 1e24, 1.0, 2.0, 1.0).unwrap();
        assert!((p.total - 1.0).abs() < 1e-11);
        let a = 2.7;
        let p1 = theoretical_scaling(10.0, 5.0, 1.0, a, 1.0).unwrap();
        let p2 = theoretical_scaling(20.0, 5.0, 1.0, a, 1.0).unwrap();
        assert!((p2.approx_term / p1.approx_term - 2f64.powf(1.0 - a)).abs() < 1e-14);
        assert!(theoretical_scaling(10.0, 5.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn noise_ratio_examples() {
        let g = Covariance::from_eigenvalues(vec![1.0, 1.0]).unwrap();
        let mut w = DMatrix::zeros(2, 1);
        w[(0, 0)] = 1.0;
        let spec = diag_spec(&[1.0]);
        let v0 = SketchedModel::zeros(1, 1);
        let r = noise_ratio(&ParameterMatrix::from_matrix(w), &g, &v0, &spec, 1.0).unwrap();
        assert_eq!(r, 1.0);
        let r = noise_ratio(&ParameterMatrix::zeros(2, 1), &g, &v0, &spec, 1.0).unwrap();
        assert_eq!(r, 0.0);
        assert!(noise_ratio(&ParameterMatrix::zeros(2, 1), &g, &v0, &spec, 0.0).is_err());
    }

    #[test]
    fn isserlis_scalar_and_zero() {
        let g = Covariance::from_eigenvalues(vec![1.5]).unwrap();
        let a = DMatrix::from_element(1, 1, 0.7);
        let m = isserlis_fourth_moment(&g, &a).unwrap();
        assert!((m[(0, 0)] - 3.0 * 0.7 * 1.5 * 1.5).abs() < 1e-14);
        let g3 = Covariance::power_law(3, 2.0, 1.0).unwrap();
        assert_eq!(isserlis_fourth_moment(&g3, &DMatrix::zeros(3, 3)).unwrap(), DMatrix::zeros(3, 3));
        assert!(isserlis_fourth_moment(&g3, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn hypercontractivity_examples() {
        let id = Covariance::from_eigenvalues(vec![1.0]).unwrap();
        let a = DMatrix::identity(1, 1);
        assert!(!hypercontractivity_check(&id, &a, 1.0).unwrap().passed);
        assert!(hypercontractivity_check(&id, &a, 3.0).unwrap().passed);

        // A = e1 e1^T, G = diag(2, 1): moment = 2·G + 2·diag(4, 0) = diag(12, 2);
        // 3·tr(GA)·G = diag(12, 6) ⇒ gap diag(0, 4)
        let g = Covariance::from_eigenvalues(vec![2.0, 1.0]).unwrap();
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 0)] = 1.0;
        let m = isserlis_fourth_moment(&g, &a).unwrap();
        assert!(max_abs(&(m - DMatrix::from_diagonal(&DVector::from_vec(vec![12.0, 2.0])))) < 1e-14);
        let c = hypercontractivity_check(&g, &a, 3.0).unwrap();
        assert!(c.passed);
        assert!(c.min_eigenvalue.abs() < 1e-12);
    }

    #[test]
    fn fourth_moment_monte_carlo_agrees() {
        let g = Covariance::from_eigenvalues(vec![1.0, 0.5, 0.25]).unwrap();
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.3, 0.5, 0.1, 0.0, 0.4, 0.8]);
        let a = &b * b.transpose();
        let exact = isserlis_fourth_moment(&g, &a).unwrap();
        let (mean, se) = oracle::fourth_moment_monte_carlo(&g, &a, 200_000, &mut rng::seeded(17));
        for i in 0..3 {
            for j in 0..3 {
                assert!((mean[(i, j)] - exact[(i, j)]).abs() <= 4.0 * se[(i, j)], "({i},{j})");
            }
        }
    }
}
