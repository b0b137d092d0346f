//! Self-check suite: every closed form against an independent route.
//!
//! Each check draws its random instances from [`Purpose::Check`] streams, so
//! a given seed always produces the same table. A named fault can be
//! injected to confirm that a broken formula is actually caught.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::max_abs;
use crate::oracle;
use crate::regression::{self, SketchSystem, SketchedModel};
use crate::rng::{self, Purpose, TrialRng};
use crate::sampling::{ParameterMatrix, SketchMatrix, SketchedDataStream};
use crate::sgd::StepSchedule;
use crate::spectrum::Covariance;
use crate::theory::{self, SketchedSpectrum};

pub const CHECK_NAMES: [&str; 8] = [
    "normal-equations",
    "pythagorean",
    "bias-product",
    "effective-dimension",
    "isserlis",
    "hypercontractivity",
    "joint-sampler",
    "irreducible-floor",
];

/// Relative size of the perturbation applied by an injected fault. Monte
/// Carlo checks get a larger one so it clears their sampling error.
const FAULT_SKEW: f64 = 1e-3;
const SAMPLED_FAULT_SKEW: f64 = 0.25;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Run every check. `fault` names a check whose computed side gets skewed.
pub fn run_verification(seed: u64, fault: Option<&str>) -> Result<VerifyReport> {
    if let Some(f) = fault {
        if !CHECK_NAMES.contains(&f) {
            return Err(Error::invalid(format!("unknown check {f:?}; expected one of {}", CHECK_NAMES.join(", "))));
        }
    }
    let skew = |name: &str| if fault == Some(name) { FAULT_SKEW } else { 0.0 };
    let checks = vec![
        normal_equations(seed, skew("normal-equations"))?,
        pythagorean(seed, skew("pythagorean"))?,
        bias_product(seed, skew("bias-product"))?,
        effective_dimension(skew("effective-dimension"))?,
        isserlis(seed, skew("isserlis") / FAULT_SKEW * SAMPLED_FAULT_SKEW)?,
        hypercontractivity(seed, skew("hypercontractivity"))?,
        joint_sampler(seed, skew("joint-sampler") / FAULT_SKEW * SAMPLED_FAULT_SKEW)?,
        irreducible_floor(seed, skew("irreducible-floor"))?,
    ];
    Ok(VerifyReport { seed, checks })
}

fn check_rng(seed: u64, check: usize, instance: usize) -> TrialRng {
    rng::stream(seed, Purpose::Check, &[check as u64, instance as u64])
}

/// Small random `(G, R, W*)` with `d ≤ max_d`, `m ≤ min(max_m, d)`, `p ≤ max_p`.
pub fn random_instance(rng: &mut TrialRng, max_d: usize, max_m: usize, max_p: usize) -> Result<(Covariance, SketchMatrix, ParameterMatrix)> {
    let d = rng.random_range(2..=max_d);
    let m = rng.random_range(1..=max_m.min(d));
    let p = rng.random_range(1..=max_p);
    let a = rng.random_range(1.2..3.0);
    let mut g = Covariance::power_law(d, a, 1.0)?;
    if rng.random_bool(0.5) {
        g = g.rotated(rng.random())?;
    }
    let r = SketchMatrix::draw_with(m, d, rng)?;
    let w = ParameterMatrix::draw_with(d, p, rng)?;
    Ok((g, r, w))
}

pub fn random_psd<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let b = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    &b * b.transpose()
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Result<CheckResult> {
    Ok(CheckResult { name, passed, detail })
}

fn normal_equations(seed: u64, skew: f64) -> Result<CheckResult> {
    let mut worst_v = 0.0f64;
    let mut worst_approx = 0.0f64;
    for k in 0..50 {
        let mut rng = check_rng(seed, 0, k);
        let (g, r, w) = random_instance(&mut rng, 8, 4, 3)?;
        let sys = SketchSystem::new(&r, &g, &w)?;
        let v = sys.optimal().into_matrix() * (1.0 + skew);
        let oracle_v = regression::brute_force_optimal(&r, &g, &w)?;
        worst_v = worst_v.max(max_abs(&(v - oracle_v.matrix())));
        let approx = oracle::approx_projection(&r, &g, &w)?;
        worst_approx = worst_approx.max((sys.approx() - approx).abs());
    }
    outcome(
        "normal-equations",
        worst_v <= 1e-9 && worst_approx <= 1e-9,
        format!("max |V* - oracle| = {worst_v:.2e}, max |approx - projection| = {worst_approx:.2e} (50 instances)"),
    )
}

fn pythagorean(seed: u64, skew: f64) -> Result<CheckResult> {
    let sigma2 = 0.7;
    let mut worst = 0.0f64;
    for k in 0..50 {
        let mut rng = check_rng(seed, 1, k);
        let (g, r, w) = random_instance(&mut rng, 8, 4, 3)?;
        let sys = SketchSystem::new(&r, &g, &w)?;
        for _ in 0..20 {
            let v = SketchedModel::from_matrix(DMatrix::from_fn(sys.m(), sys.p(), |_, _| rng.sample::<f64, _>(StandardNormal)));
            let risk = regression::sketched_risk(&v, &r, &g, &w, sigma2)? * (1.0 + skew);
            let parts = sigma2 + sys.approx() + sys.excess(&v)?;
            worst = worst.max(rel_err(risk, parts));
        }
    }
    outcome("pythagorean", worst <= 1e-10, format!("max relative gap = {worst:.2e} (50 x 20 models)"))
}

fn bias_product(seed: u64, skew: f64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for k in 0..50 {
        let mut rng = check_rng(seed, 2, k);
        let (g, r, w) = random_instance(&mut rng, 10, 6, 2)?;
        let sys = SketchSystem::new(&r, &g, &w)?;
        let n = rng.random_range(0..=64);
        let gamma = rng.random_range(0.1..0.9) / sys.gram_trace();
        let schedule = if rng.random_bool(0.5) {
            StepSchedule::step_decay(gamma, n)?
        } else {
            StepSchedule::constant(gamma, n)?
        };
        let v0 = SketchedModel::from_matrix(DMatrix::from_fn(sys.m(), sys.p(), |_, _| rng.sample::<f64, _>(StandardNormal)));
        let v_star = sys.optimal();
        let spec = SketchedSpectrum::from_gram(sys.gram())?;
        let eigen = theory::bias_term(&spec, &schedule, &v0, &v_star)?.value * (1.0 + skew);
        let explicit = oracle::bias_explicit_product(sys.gram(), &schedule, v0.matrix(), v_star.matrix());
        worst = worst.max(rel_err(eigen, explicit));
    }
    outcome("bias-product", worst <= 1e-9, format!("max relative gap = {worst:.2e} (50 instances)"))
}

fn effective_dimension(skew: f64) -> Result<CheckResult> {
    let gram = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.01]));
    let spec = SketchedSpectrum::from_gram(&gram)?;
    let (d_eff, variance) = theory::variance_term(&spec, 4.0, 1.0)?;
    let d_eff = d_eff * (1.0 + skew);
    let passed = (d_eff - 2.0016).abs() <= 1e-12 && rel_err(variance * 4.0, d_eff) <= 1e-12;
    outcome("effective-dimension", passed, format!("D_eff = {d_eff:.6} for spectrum (1, 0.5, 0.01) at N_eff*gamma = 4"))
}

fn isserlis(seed: u64, skew: f64) -> Result<CheckResult> {
    let mut worst_z = 0.0f64;
    for (k, d) in [2usize, 4, 8].into_iter().enumerate() {
        let mut rng = check_rng(seed, 4, k);
        let g = Covariance::power_law(d, 2.0, 1.0)?.rotated(rng.random())?;
        let a = random_psd(d, &mut rng);
        let closed = theory::isserlis_fourth_moment(&g, &a)? * (1.0 + skew);
        let (mean, stderr) = oracle::fourth_moment_monte_carlo(&g, &a, 100_000, &mut rng);
        for i in 0..d {
            for j in 0..d {
                let z = (mean[(i, j)] - closed[(i, j)]).abs() / stderr[(i, j)].max(1e-300);
                worst_z = worst_z.max(z);
            }
        }
    }
    outcome("isserlis", worst_z <= 4.0, format!("max |z| = {worst_z:.2} over d in (2, 4, 8), 1e5 samples each"))
}

fn hypercontractivity(seed: u64, skew: f64) -> Result<CheckResult> {
    // a skewed run tests at an alpha just under the Gaussian constant
    let alpha = if skew > 0.0 { 1.0 } else { 3.0 };
    let mut passes = 0;
    let mut total = 0;
    for (k, d) in [2usize, 4, 8].into_iter().enumerate() {
        for i in 0..50 {
            let mut rng = check_rng(seed, 5, k * 100 + i);
            let g = Covariance::power_law(d, 2.0, 1.0)?.rotated(rng.random())?;
            let a = random_psd(d, &mut rng);
            total += 1;
            if theory::hypercontractivity_check(&g, &a, alpha)?.passed {
                passes += 1;
            }
        }
    }
    let g = Covariance::from_eigenvalues(vec![1.0])?;
    let counter = theory::hypercontractivity_check(&g, &DMatrix::identity(1, 1), 1.0)?;
    outcome(
        "hypercontractivity",
        passes == total && !counter.passed,
        format!("alpha = 3 passes {passes}/{total}; alpha = 1 with A = G = I gives min eigenvalue {:.3}", counter.min_eigenvalue),
    )
}

fn joint_sampler(seed: u64, skew: f64) -> Result<CheckResult> {
    let mut rng = check_rng(seed, 6, 0);
    let (d, m, p) = (8, 3, 2);
    let sigma2 = 0.5;
    let g = Covariance::power_law(d, 2.0, 1.0)?.rotated(rng.random())?;
    let r = SketchMatrix::draw_with(m, d, &mut rng)?;
    let w = ParameterMatrix::draw_with(d, p, &mut rng)?;
    let stream = SketchedDataStream::build(&r, &g, &w, sigma2)?;
    // reference covariance assembled from the dense matrices
    let gd = g.dense();
    let rm = r.matrix();
    let wm = w.matrix();
    let mut want = DMatrix::<f64>::zeros(m + p, m + p);
    want.view_mut((0, 0), (m, m)).copy_from(&oracle::naive_mul(&oracle::naive_mul(rm, &gd), &rm.transpose()));
    let rgw = oracle::naive_mul(&oracle::naive_mul(rm, &gd), wm);
    want.view_mut((0, m), (m, p)).copy_from(&rgw);
    want.view_mut((m, 0), (p, m)).copy_from(&rgw.transpose());
    let wgw = oracle::naive_mul(&oracle::naive_mul(&wm.transpose(), &gd), wm);
    want.view_mut((m, m), (p, p)).copy_from(&(wgw + DMatrix::identity(p, p) * (sigma2 / p as f64)));

    let n = 100_000;
    let k = m + p;
    let mut sum = DMatrix::<f64>::zeros(k, k);
    let mut sum_sq = DMatrix::<f64>::zeros(k, k);
    let mut noise = vec![0.0; k];
    let mut out = vec![0.0; k];
    for _ in 0..n {
        stream.sample_into(&mut rng, &mut noise, &mut out);
        for i in 0..k {
            for j in 0..k {
                let v = out[i] * out[j] * (1.0 + skew);
                sum[(i, j)] += v;
                sum_sq[(i, j)] += v * v;
            }
        }
    }
    let nf = n as f64;
    let mut worst_z = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let mean = sum[(i, j)] / nf;
            let var = (sum_sq[(i, j)] / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
            let se = (var / nf).sqrt().max(1e-300);
            worst_z = worst_z.max((mean - want[(i, j)]).abs() / se);
        }
    }
    outcome("joint-sampler", worst_z <= 4.5, format!("max |z| = {worst_z:.2} over the (z, y) second moments, 1e5 draws"))
}

fn irreducible_floor(seed: u64, skew: f64) -> Result<CheckResult> {
    let sigma2 = 1.3;
    let mut floor_ok = true;
    let mut worst = 0.0f64;
    let mut negative = false;
    for k in 0..20 {
        let mut rng = check_rng(seed, 7, k);
        let (g, r, w) = random_instance(&mut rng, 8, 4, 3)?;
        let floor = regression::full_risk(w.matrix(), &g, &w, sigma2)? * (1.0 + skew);
        floor_ok &= floor == sigma2;
        let sys = SketchSystem::new(&r, &g, &w)?;
        let v = SketchedModel::from_matrix(DMatrix::from_fn(sys.m(), sys.p(), |_, _| rng.sample::<f64, _>(StandardNormal)));
        let rep = sys.decompose(&v, sigma2)?;
        negative |= rep.irreducible < 0.0 || rep.approx < 0.0 || rep.excess < 0.0;
        worst = worst.max(rel_err(rep.component_sum(), rep.total));
    }
    outcome(
        "irreducible-floor",
        floor_ok && !negative && worst <= 1e-10,
        format!("L(W*) = sigma^2 exactly: {floor_ok}; max relative gap of component sum = {worst:.2e}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let rep = run_verification(0, None).unwrap();
        for c in &rep.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(rep.checks.len(), CHECK_NAMES.len());
    }

    #[test]
    fn each_fault_is_caught_by_name() {
        for name in CHECK_NAMES {
            let rep = run_verification(0, Some(name)).unwrap();
            let failed: Vec<_> = rep.failed().map(|c| c.name).collect();
            assert_eq!(failed, vec![name]);
        }
    }

    #[test]
    fn unknown_fault_rejected() {
        assert!(run_verification(0, Some("nonsense")).is_err());
    }
}
