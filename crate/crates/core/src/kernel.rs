//! Sketched kernel regression: the multiple-regression machinery applied to
//! a feature map `φ` with scalar labels.
//!
//! Two maps are provided. The Gaussian-synthetic map draws `φ ~ N(0, Φ)`
//! directly, which is exactly the premise under which the closed forms hold.
//! Random Fourier features are a deterministic map of Gaussian inputs; they
//! break Gaussianity and are run as a labelled stress test with an empirical
//! `Φ`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen_desc;
use crate::regression::{DecompositionReport, SketchSystem, SketchedModel};
use crate::rng;
use crate::sampling::{ParameterMatrix, SketchMatrix, SketchedDataStream};
use crate::sgd::{self, StepSchedule};
use crate::spectrum::Covariance;
use crate::theory::{theory_report, SketchedSpectrum, TheoryReport};

/// Draws used to estimate `Φ` for maps that are not Gaussian by construction.
pub const EMPIRICAL_COVARIANCE_SAMPLES: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    GaussianSynthetic,
    RandomFourier,
}

#[derive(Clone, Debug)]
pub enum FeatureMap {
    GaussianSynthetic {
        covariance: Covariance,
    },
    /// `φ_k(x) = √(2/p) · cos(⟨ω_k, x⟩ + b_k)`.
    RandomFourier {
        bandwidth: f64,
        frequencies: DMatrix<f64>,
        phases: DVector<f64>,
    },
}

impl FeatureMap {
    pub fn gaussian_synthetic(covariance: Covariance) -> Self {
        FeatureMap::GaussianSynthetic { covariance }
    }

    /// Frequencies `ω_k ~ N(0, I / bandwidth²)`, phases `b_k ~ U[0, 2π)`.
    pub fn random_fourier(input_dim: usize, p: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || p == 0 {
            return Err(Error::invalid("random Fourier map needs positive dimensions"));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let mut rng = rng::seeded(seed);
        let normal = Normal::new(0.0, 1.0 / bandwidth).expect("positive std");
        let frequencies = DMatrix::from_fn(p, input_dim, |_, _| normal.sample(&mut rng));
        let uniform = Uniform::new(0.0, 2.0 * PI).expect("valid range");
        let phases = DVector::from_fn(p, |_, _| uniform.sample(&mut rng));
        Self::random_fourier_from_parts(frequencies, phases, bandwidth)
    }

    pub fn random_fourier_from_parts(frequencies: DMatrix<f64>, phases: DVector<f64>, bandwidth: f64) -> Result<Self> {
        if frequencies.nrows() != phases.len() {
            return Err(Error::dims("FeatureMap::random_fourier", frequencies.nrows(), phases.len()));
        }
        Ok(FeatureMap::RandomFourier {
            bandwidth,
            frequencies,
            phases,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureMap::GaussianSynthetic { .. } => FeatureKind::GaussianSynthetic,
            FeatureMap::RandomFourier { .. } => FeatureKind::RandomFourier,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::GaussianSynthetic { covariance } => covariance.dim(),
            FeatureMap::RandomFourier { phases, .. } => phases.len(),
        }
    }

    /// Input dimension, if the map reads its input at all.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            FeatureMap::GaussianSynthetic { .. } => None,
            FeatureMap::RandomFourier { frequencies, .. } => Some(frequencies.ncols()),
        }
    }

    pub fn satisfies_gaussianity(&self) -> bool {
        matches!(self, FeatureMap::GaussianSynthetic { .. })
    }

    /// `φ(x)`. The Gaussian-synthetic map ignores `x` and draws from
    /// `N(0, Φ)`.
    pub fn apply<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        match self {
            FeatureMap::GaussianSynthetic { covariance } => Ok(covariance.sample(rng)),
            FeatureMap::RandomFourier {
                frequencies, phases, ..
            } => {
                if x.len() != frequencies.ncols() {
                    return Err(Error::dims("FeatureMap::apply", frequencies.ncols(), x.len()));
                }
                let amp = (2.0 / phases.len() as f64).sqrt();
                Ok((frequencies * x + phases).map(|v| amp * v.cos()))
            }
        }
    }

    /// `φ(x)` for a fresh input `x ~ N(0, I)`.
    pub fn sample_feature<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            FeatureMap::GaussianSynthetic { covariance } => covariance.sample(rng),
            FeatureMap::RandomFourier { frequencies, .. } => {
                let x = DVector::from_fn(frequencies.ncols(), |_, _| StandardNormal.sample(rng));
                self.apply(&x, rng).expect("input dimension matches")
            }
        }
    }

    /// `Φ = E[φ φ^T]`: exact for the Gaussian-synthetic map, estimated from
    /// `samples` draws otherwise.
    pub fn covariance<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> Result<Covariance> {
        match self {
            FeatureMap::GaussianSynthetic { covariance } => Ok(covariance.clone()),
            FeatureMap::RandomFourier { .. } => {
                if samples == 0 {
                    return Err(Error::invalid("empirical covariance needs samples"));
                }
                let p = self.output_dim();
                let mut acc = DMatrix::<f64>::zeros(p, p);
                for _ in 0..samples {
                    let f = self.sample_feature(rng);
                    acc.syger(1.0, &f, &f, 1.0);
                }
                // syger fills the lower triangle only
                acc.fill_upper_triangle_with_lower_triangle();
                acc /= samples as f64;
                let (vals, vecs) = symmetric_eigen_desc(&acc)?;
                let vals: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
                Covariance::from_eigenvalues(vals)?.with_rotation(vecs)
            }
        }
    }
}

/// Output of one kernel training run.
#[derive(Clone, Debug, Serialize)]
pub struct KernelRunReport {
    pub decomposition: DecompositionReport,
    pub theory: TheoryReport,
    pub assumptions_violated: bool,
}

/// Train the sketched kernel predictor with one-pass SGD and evaluate every
/// closed form with `Φ` in place of `G`.
pub fn kernel_scaling_run(
    map: &FeatureMap,
    r: &SketchMatrix,
    w_star: &ParameterMatrix,
    sigma2: f64,
    schedule: &StepSchedule,
    seed: u64,
) -> Result<KernelRunReport> {
    if w_star.p() != 1 {
        return Err(Error::invalid("kernel regression uses scalar labels (p = 1)"));
    }
    if r.d() != map.output_dim() || w_star.d() != map.output_dim() {
        return Err(Error::dims("kernel_scaling_run", map.output_dim(), format!("R {}x{}, w* {}", r.m(), r.d(), w_star.d())));
    }
    let mut cov_rng = rng::stream(seed, rng::Purpose::Feature, &[0]);
    let phi = map.covariance(EMPIRICAL_COVARIANCE_SAMPLES, &mut cov_rng)?;
    let sys = SketchSystem::new(r, &phi, w_star)?;
    let v0 = SketchedModel::zeros(r.m(), 1);
    let mut data_rng = rng::stream(seed, rng::Purpose::Data, &[0]);
    let v_n = match map {
        FeatureMap::GaussianSynthetic { .. } => {
            let stream = SketchedDataStream::from_system(&sys, sigma2)?;
            sgd::train_one_pass(&stream, schedule, &v0, &mut data_rng)?
        }
        FeatureMap::RandomFourier { .. } => {
            let noise = sigma2.sqrt();
            let w = w_star.matrix().column(0).clone_owned();
            sgd::train_from_source(schedule, &v0, |z, y| {
                let f = map.sample_feature(&mut data_rng);
                let e: f64 = StandardNormal.sample(&mut data_rng);
                let zf = r.matrix() * &f;
                z.copy_from_slice(zf.as_slice());
                y[0] = w.dot(&f) + noise * e;
            })?
        }
    };
    let spec = SketchedSpectrum::from_gram(sys.gram())?;
    let theory = theory_report(&spec, schedule, &v0, &sys.optimal(), sys.signal(), sigma2)?;
    Ok(KernelRunReport {
        decomposition: sys.decompose(&v_n, sigma2)?,
        theory,
        assumptions_violated: !map.satisfies_gaussianity(),
    })
}

/// Largest entrywise deviation between the Monte Carlo covariance of `Rφ`
/// and `R Φ R^T`, in units of each entry's standard error.
pub fn verify_sketched_gaussianity<G: Rng + ?Sized>(map: &FeatureMap, r: &SketchMatrix, samples: usize, rng: &mut G) -> Result<f64> {
    let FeatureMap::GaussianSynthetic { covariance } = map else {
        return Err(Error::invalid("sketched Gaussianity is only defined for the Gaussian-synthetic map"));
    };
    if r.d() != covariance.dim() {
        return Err(Error::dims("verify_sketched_gaussianity", covariance.dim(), r.d()));
    }
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let m = r.m();
    let root = covariance.sketch_root(r.matrix())?;
    let exact = &root * root.transpose();
    let mut sum = DMatrix::<f64>::zeros(m, m);
    let mut sum_sq = DMatrix::<f64>::zeros(m, m);
    for _ in 0..samples {
        let z = r.matrix() * covariance.sample(rng);
        for i in 0..m {
            for j in 0..=i {
                let v = z[i] * z[j];
                sum[(i, j)] += v;
                sum_sq[(i, j)] += v * v;
            }
        }
    }
    let n = samples as f64;
    let mut worst = 0.0_f64;
    for i in 0..m {
        for j in 0..=i {
            let mean = sum[(i, j)] / n;
            let var = ((sum_sq[(i, j)] / n - mean * mean) * n / (n - 1.0)).max(0.0);
            let se = (var / n).sqrt();
            let dev = (mean - exact[(i, j)]).abs();
            let score = if se > 0.0 {
                dev / se
            } else if dev == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(score);
        }
    }
    Ok(worst)
}

/// Monte Carlo estimate of `E[(y − ⟨Rφ, V*⟩)²]` with its standard error,
/// next to the closed-form `σ² + Approx`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ResidualCheck {
    pub monte_carlo: f64,
    pub stderr: f64,
    pub closed_form: f64,
}

impl ResidualCheck {
    pub fn z_score(&self) -> f64 {
        let dev = (self.monte_carlo - self.closed_form).abs();
        if self.stderr > 0.0 {
            dev / self.stderr
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

pub fn residual_check<G: Rng + ?Sized>(
    map: &FeatureMap,
    r: &SketchMatrix,
    w_star: &ParameterMatrix,
    sigma2: f64,
    samples: usize,
    rng: &mut G,
) -> Result<ResidualCheck> {
    if w_star.p() != 1 {
        return Err(Error::invalid("kernel regression uses scalar labels (p = 1)"));
    }
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let phi = map.covariance(EMPIRICAL_COVARIANCE_SAMPLES, rng)?;
    let sys = SketchSystem::new(r, &phi, w_star)?;
    let v = sys.optimal().matrix().column(0).clone_owned();
    // ⟨Rφ, V*⟩ = ⟨φ, R^T V*⟩
    let pulled = r.matrix().tr_mul(&v);
    let w = w_star.matrix().column(0).clone_owned();
    let noise = sigma2.sqrt();
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let f = map.sample_feature(rng);
        let e: f64 = StandardNormal.sample(rng);
        let y = w.dot(&f) + noise * e;
        let res = (y - pulled.dot(&f)).powi(2);
        s += res;
        s2 += res * res;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = ((s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(ResidualCheck {
        monte_carlo: mean,
        stderr: (var / n).sqrt(),
        closed_form: sigma2 + sys.approx(),
    })
}
