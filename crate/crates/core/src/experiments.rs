//! Monte Carlo sweeps, log-log fits and result files.
//!
//! Seeds are derived per `(purpose, grid value, trial)` through
//! [`crate::rng`], so the emitted `sweep.csv` is a pure function of the
//! config and does not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kernel::{self, FeatureKind, FeatureMap, KernelRunReport, ResidualCheck};
use crate::regression::{DecompositionReport, SketchSystem, SketchedModel};
use crate::rng::{self, Purpose};
use crate::sampling::{ParameterMatrix, SketchMatrix, SketchedDataStream};
use crate::sgd::{self, ScheduleMode, StepSchedule};
use crate::spectrum::Covariance;
use crate::theory::{theory_report, SketchedSpectrum, TheoryReport};
use crate::trials::run_trials;

pub const RESULTS_VERSION: &str = concat!("sketchlaw ", env!("CARGO_PKG_VERSION"));

/// Condition-guard failures are retried with a fresh sketch this many times.
pub const SKETCH_ATTEMPTS: u64 = 3;

/// A grid point fails the sweep when more than this fraction of its trials
/// failed.
pub const MAX_FAILED_FRACTION: f64 = 0.25;

pub const CSV_HEADER: &str = "axis,grid_value,trial,approx,excess,bias,variance,d_eff,rnr,flags";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    SketchDim,
    Samples,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::SketchDim => "sketch-dim",
            SweepAxis::Samples => "samples",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaPolicy {
    /// `1 / (c0 · tr(RGR^T))` per trial.
    Auto,
    Explicit(f64),
}

/// Which command a preset is meant for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetTarget {
    SweepM,
    SweepN,
    Kernel,
    Decompose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Ambient dimension (feature dimension for kernel runs).
    pub d: usize,
    /// Label dimension.
    pub p: usize,
    pub a: f64,
    pub sigma2: f64,
    pub scale: f64,
    pub sweep_axis: SweepAxis,
    pub grid: Vec<usize>,
    pub fixed_m: usize,
    pub fixed_n: usize,
    pub trials: usize,
    pub master_seed: u64,
    pub gamma_policy: GammaPolicy,
    pub c0: f64,
    pub schedule_mode: ScheduleMode,
    pub rotation: bool,
    /// Use `R = I` (requires `m = d`).
    pub identity_sketch: bool,
    /// Keep one sketch per grid point across trials; only `W*` varies.
    pub fixed_sketch: bool,
    /// Skip SGD in the sample sweep and evaluate the theory terms only.
    pub theory_only: bool,
    /// Force `W* = 0`.
    pub zero_parameter: bool,
    pub feature_map: FeatureKind,
    pub input_dim: usize,
    pub bandwidth: f64,
    pub kernel_check_m: usize,
    pub kernel_check_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            d: 1024,
            p: 2,
            a: 2.0,
            sigma2: 1.0,
            scale: 1.0,
            sweep_axis: SweepAxis::SketchDim,
            grid: vec![16, 32, 64, 128, 256],
            fixed_m: 64,
            fixed_n: 10_000,
            trials: 32,
            master_seed: 0,
            gamma_policy: GammaPolicy::Auto,
            c0: 2.0,
            schedule_mode: ScheduleMode::StepDecay,
            rotation: false,
            identity_sketch: false,
            fixed_sketch: false,
            theory_only: false,
            zero_parameter: false,
            feature_map: FeatureKind::GaussianSynthetic,
            input_dim: 8,
            bandwidth: 1.0,
            kernel_check_m: 4,
            kernel_check_samples: 100_000,
        }
    }
}

impl ExperimentConfig {
    /// Built-in defaults for a command.
    pub fn defaults_for(target: PresetTarget) -> Self {
        Self::preset("default", target).expect("default preset exists")
    }

    /// Named configurations: `default`, `quick`, `paper-a2`, `paper-a3`.
    pub fn preset(name: &str, target: PresetTarget) -> Option<Self> {
        let base = ExperimentConfig::default();
        let a = match name {
            "default" | "paper-a2" => 2.0,
            "paper-a3" => 3.0,
            "quick" => {
                return Some(match target {
                    PresetTarget::SweepM => ExperimentConfig {
                        d: 256,
                        grid: vec![8, 16, 32, 64],
                        trials: 8,
                        ..base
                    },
                    PresetTarget::SweepN => ExperimentConfig {
                        d: 256,
                        p: 1,
                        sweep_axis: SweepAxis::Samples,
                        fixed_m: 32,
                        grid: vec![500, 1000, 2000, 4000],
                        trials: 8,
                        ..base
                    },
                    PresetTarget::Kernel => ExperimentConfig {
                        d: 128,
                        p: 1,
                        grid: vec![8, 16, 32, 64],
                        fixed_m: 16,
                        fixed_n: 2000,
                        trials: 8,
                        kernel_check_samples: 20_000,
                        ..base
                    },
                    PresetTarget::Decompose => ExperimentConfig {
                        d: 256,
                        fixed_m: 32,
                        fixed_n: 2000,
                        ..base
                    },
                })
            }
            _ => return None,
        };
        Some(match target {
            PresetTarget::SweepM => ExperimentConfig {
                a,
                d: 4096,
                p: 2,
                grid: vec![16, 32, 64, 128, 256],
                trials: 32,
                ..base
            },
            PresetTarget::SweepN => ExperimentConfig {
                a,
                d: 2048,
                p: 1,
                sweep_axis: SweepAxis::Samples,
                fixed_m: 512,
                grid: vec![1000, 2000, 4000, 8000, 16000, 32000],
                trials: 16,
                ..base
            },
            PresetTarget::Kernel => ExperimentConfig {
                a,
                d: 512,
                p: 1,
                grid: vec![8, 16, 32, 64, 128],
                fixed_m: 64,
                fixed_n: 10_000,
                trials: 32,
                ..base
            },
            PresetTarget::Decompose => ExperimentConfig { a, ..base },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.p == 0 {
            return Err(Error::invalid("d and p must be positive"));
        }
        if !(self.a > 1.0) {
            return Err(Error::invalid(format!("a must exceed 1, got {}", self.a)));
        }
        if !(self.sigma2 >= 0.0) || !(self.scale > 0.0) {
            return Err(Error::invalid("sigma2 must be >= 0 and scale > 0"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials must be >= 1"));
        }
        if self.grid.is_empty() || self.grid.contains(&0) {
            return Err(Error::invalid("grid must be non-empty and positive"));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("grid must be strictly increasing"));
        }
        if self.fixed_m == 0 {
            return Err(Error::invalid("fixed_m must be positive"));
        }
        if !(self.c0 > 1.0) {
            return Err(Error::invalid("c0 must exceed 1"));
        }
        if let GammaPolicy::Explicit(g) = self.gamma_policy {
            if !(g > 0.0) {
                return Err(Error::invalid("explicit gamma must be positive"));
            }
        }
        Ok(())
    }

    /// Stricter checks for configurations whose slope is asserted on: at
    /// least 4 grid points spanning 3 doublings, and at least 8 trials.
    pub fn validate_for_acceptance(&self) -> Result<()> {
        self.validate()?;
        if self.grid.len() < 4 || self.grid[self.grid.len() - 1] < 8 * self.grid[0] {
            return Err(Error::invalid("acceptance grids need >= 4 points spanning >= 3 doublings"));
        }
        if self.trials < 8 {
            return Err(Error::invalid("acceptance runs need >= 8 trials"));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<Covariance> {
        let g = Covariance::power_law(self.d, self.a, self.scale)?;
        if self.rotation {
            g.rotated(rng::derive_seed(self.master_seed, Purpose::Rotation, &[]))
        } else {
            Ok(g)
        }
    }

    fn parameter(&self, d: usize, trial: usize) -> Result<ParameterMatrix> {
        if self.zero_parameter {
            return Ok(ParameterMatrix::zeros(d, self.p));
        }
        let mut r = rng::stream(self.master_seed, Purpose::Parameter, &[trial as u64]);
        ParameterMatrix::draw_with(d, self.p, &mut r)
    }

    fn sketch(&self, m: usize, d: usize, trial: usize, attempt: u64) -> Result<SketchMatrix> {
        if self.identity_sketch {
            if m != d {
                return Err(Error::invalid(format!("identity sketch needs m = d, got m = {m}, d = {d}")));
            }
            return Ok(SketchMatrix::identity(d));
        }
        let trial_key = if self.fixed_sketch { u64::MAX } else { trial as u64 };
        let mut r = rng::stream(self.master_seed, Purpose::Sketch, &[m as u64, trial_key, attempt]);
        SketchMatrix::draw_with(m, d, &mut r)
    }

    /// Draw `(R, W*)` and factor the Gram matrix, resampling `R` when the
    /// condition guard trips.
    fn system(&self, g: &Covariance, m: usize, trial: usize) -> Result<(SketchSystem, u64)> {
        let w = self.parameter(g.dim(), trial)?;
        let mut last = None;
        for attempt in 0..SKETCH_ATTEMPTS {
            let r = self.sketch(m, g.dim(), trial, attempt)?;
            match SketchSystem::new(&r, g, &w) {
                Ok(sys) => return Ok((sys, attempt)),
                Err(e @ Error::IllConditioned { .. }) => {
                    log::warn!("m = {m}, trial {trial}: {e}; resampling sketch");
                    last = Some(e);
                    if self.identity_sketch {
                        break;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn gamma(&self, sys: &SketchSystem) -> Result<f64> {
        match self.gamma_policy {
            GammaPolicy::Auto => sgd::default_gamma_for(sys, self.c0),
            GammaPolicy::Explicit(g) => Ok(g),
        }
    }
}

/// Per-trial measurements. Quantities that a sweep does not compute are
/// `None` and appear as empty CSV fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrialValues {
    pub approx: Option<f64>,
    pub excess: Option<f64>,
    pub bias: Option<f64>,
    pub variance: Option<f64>,
    pub d_eff: Option<f64>,
    pub rnr: Option<f64>,
    /// `bias + σ²·variance`.
    pub prediction: Option<f64>,
    pub gamma: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Quantity {
    Approx,
    Excess,
    Bias,
    Variance,
    DEff,
    Rnr,
    Prediction,
}

impl Quantity {
    pub const ALL: [Quantity; 7] = [
        Quantity::Approx,
        Quantity::Excess,
        Quantity::Bias,
        Quantity::Variance,
        Quantity::DEff,
        Quantity::Rnr,
        Quantity::Prediction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Approx => "approx",
            Quantity::Excess => "excess",
            Quantity::Bias => "bias",
            Quantity::Variance => "variance",
            Quantity::DEff => "d_eff",
            Quantity::Rnr => "rnr",
            Quantity::Prediction => "prediction",
        }
    }
}

impl TrialValues {
    pub fn get(&self, q: Quantity) -> Option<f64> {
        match q {
            Quantity::Approx => self.approx,
            Quantity::Excess => self.excess,
            Quantity::Bias => self.bias,
            Quantity::Variance => self.variance,
            Quantity::DEff => self.d_eff,
            Quantity::Rnr => self.rnr,
            Quantity::Prediction => self.prediction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub values: Option<TrialValues>,
    pub failure: Option<String>,
}

impl TrialRow {
    fn flags(&self) -> Vec<String> {
        let mut f = self.values.as_ref().map(|v| v.flags.clone()).unwrap_or_default();
        if let Some(reason) = &self.failure {
            f.push(format!("failed:{reason}"));
        }
        f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Aggregate {
    /// Mean and `sd / √n` (sample standard deviation; zero for `n = 1`).
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Some(Aggregate {
            mean,
            stderr,
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub axis: SweepAxis,
    pub grid_value: usize,
    /// Abscissa used for fitting: `m`, or `N_eff · mean γ`.
    pub x_value: f64,
    pub rows: Vec<TrialRow>,
    pub aggregates: BTreeMap<&'static str, Aggregate>,
    pub failures: usize,
}

impl SweepRecord {
    pub fn from_rows(axis: SweepAxis, grid_value: usize, rows: Vec<TrialRow>, x_value: impl FnOnce(&[TrialRow]) -> f64) -> Self {
        let mut aggregates = BTreeMap::new();
        for q in Quantity::ALL {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.values.as_ref()?.get(q)).collect();
            if let Some(a) = Aggregate::of(&vals) {
                aggregates.insert(q.name(), a);
            }
        }
        let failures = rows.iter().filter(|r| r.failure.is_some()).count();
        let x_value = x_value(&rows);
        SweepRecord {
            axis,
            grid_value,
            x_value,
            rows,
            aggregates,
            failures,
        }
    }

    pub fn mean(&self, q: Quantity) -> Option<f64> {
        self.aggregates.get(q.name()).map(|a| a.mean)
    }

    pub fn degraded(&self) -> bool {
        !self.rows.is_empty() && self.failures as f64 > MAX_FAILED_FRACTION * self.rows.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
    pub residuals: Vec<f64>,
}

/// Ordinary least squares of `log y` on `log x`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    if xs.len() != ys.len() {
        return Err(Error::dims("fit_loglog", xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(Error::invalid("log-log fit needs at least 3 points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("log-log fit needs strictly positive finite inputs"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("log-log fit needs distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = lx.iter().zip(&ly).map(|(x, y)| y - (intercept + slope * x)).collect();
    let ssr: f64 = residuals.iter().map(|r| r * r).sum();
    let sst: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if sst > 0.0 { (1.0 - ssr / sst).clamp(0.0, 1.0) } else { 1.0 };
    let slope_stderr = if lx.len() > 2 { (ssr / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        slope_stderr,
        residuals,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NamedFit {
    pub quantity: &'static str,
    pub x: &'static str,
    #[serde(flatten)]
    pub fit: FitResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepOutput {
    pub axis: SweepAxis,
    pub records: Vec<SweepRecord>,
    pub fits: Vec<NamedFit>,
    pub degraded: bool,
}

impl SweepOutput {
    fn assemble(axis: SweepAxis, records: Vec<SweepRecord>, fitted: &[Quantity]) -> Self {
        let x_name = match axis {
            SweepAxis::SketchDim => "m",
            SweepAxis::Samples => "n_eff_gamma",
        };
        let mut fits = Vec::new();
        for &q in fitted {
            let pts: Vec<(f64, f64)> = records.iter().filter_map(|r| Some((r.x_value, r.mean(q)?))).collect();
            if pts.len() < 3 {
                continue;
            }
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            match fit_loglog(&xs, &ys) {
                Ok(fit) => fits.push(NamedFit {
                    quantity: q.name(),
                    x: x_name,
                    fit,
                }),
                Err(e) => log::warn!("no fit for {}: {e}", q.name()),
            }
        }
        let degraded = records.iter().any(SweepRecord::degraded);
        SweepOutput {
            axis,
            records,
            fits,
            degraded,
        }
    }

    pub fn fit(&self, quantity: &str) -> Option<&FitResult> {
        self.fits.iter().find(|f| f.quantity == quantity).map(|f| &f.fit)
    }

    pub fn failures(&self) -> usize {
        self.records.iter().map(|r| r.failures).sum()
    }
}

pub fn failure_tag(e: &Error) -> &'static str {
    match e {
        Error::Diverged { .. } => "diverged",
        Error::IllConditioned { .. } => "ill-conditioned",
        Error::TrialPanicked(_) => "panicked",
        Error::NotPositiveSemidefinite { .. } => "not-psd",
        _ => "error",
    }
}

fn row_from(trial: usize, result: Result<TrialValues>, context: &str) -> TrialRow {
    match result {
        Ok(values) => TrialRow {
            trial,
            values: Some(values),
            failure: None,
        },
        Err(e) => {
            log::warn!("{context}, trial {trial} failed: {e}");
            TrialRow {
                trial,
                values: None,
                failure: Some(failure_tag(&e).to_string()),
            }
        }
    }
}

fn resample_flag(values: &mut TrialValues, attempts: u64) {
    if attempts > 0 {
        values.flags.push(format!("resampled:{attempts}"));
    }
}

/// Approximation error along a grid of sketch sizes, closed form only.
pub fn sweep_sketch_dim(config: &ExperimentConfig, threads: usize) -> Result<SweepOutput> {
    config.validate()?;
    if config.sweep_axis != SweepAxis::SketchDim {
        return Err(Error::invalid("sweep_sketch_dim needs sweep_axis = sketch-dim"));
    }
    let g = config.covariance()?;
    sweep_sketch_dim_with(config, &g, threads, &[])
}

fn sweep_sketch_dim_with(config: &ExperimentConfig, g: &Covariance, threads: usize, extra_flags: &[&str]) -> Result<SweepOutput> {
    let mut records = Vec::with_capacity(config.grid.len());
    for &m in &config.grid {
        let outcomes = run_trials(config.trials, threads, |k| {
            let (sys, attempts) = config.system(g, m, k)?;
            let mut v = TrialValues {
                approx: Some(sys.approx()),
                rnr: (config.sigma2 > 0.0).then(|| sys.signal() / config.sigma2),
                ..TrialValues::default()
            };
            resample_flag(&mut v, attempts);
            v.flags.extend(extra_flags.iter().map(|s| s.to_string()));
            Ok(v)
        });
        let rows = outcomes
            .into_iter()
            .map(|o| row_from(o.trial, o.result, &format!("m = {m}")))
            .collect();
        records.push(SweepRecord::from_rows(SweepAxis::SketchDim, m, rows, |_| m as f64));
    }
    Ok(SweepOutput::assemble(SweepAxis::SketchDim, records, &[Quantity::Approx]))
}

/// Exact excess risk of one-pass SGD (and the matching theory terms) along
/// a grid of sample counts at fixed `m`.
pub fn sweep_samples(config: &ExperimentConfig, threads: usize) -> Result<SweepOutput> {
    config.validate()?;
    if config.sweep_axis != SweepAxis::Samples {
        return Err(Error::invalid("sweep_samples needs sweep_axis = samples"));
    }
    let g = config.covariance()?;
    let m = config.fixed_m;
    let grid = &config.grid;
    // one trial = one (R, W*) draw, trained at every grid point
    let outcomes = run_trials(config.trials, threads, |k| -> Result<Vec<Result<TrialValues>>> {
        let (sys, attempts) = config.system(&g, m, k)?;
        let gamma = config.gamma(&sys)?;
        let spec = SketchedSpectrum::from_gram(sys.gram())?;
        let v_star = sys.optimal();
        let v0 = SketchedModel::zeros(m, config.p);
        let stream = if config.theory_only {
            None
        } else {
            Some(SketchedDataStream::from_system(&sys, config.sigma2)?)
        };
        Ok(grid
            .iter()
            .map(|&n| {
                let schedule = StepSchedule::new(gamma, n, config.schedule_mode)?;
                let th = theory_report(&spec, &schedule, &v0, &v_star, sys.signal(), config.sigma2)?;
                let mut v = TrialValues {
                    bias: Some(th.bias),
                    variance: Some(th.variance),
                    d_eff: Some(th.d_eff),
                    rnr: th.rnr.is_finite().then_some(th.rnr),
                    prediction: Some(th.prediction),
                    gamma: Some(gamma),
                    ..TrialValues::default()
                };
                resample_flag(&mut v, attempts);
                if th.non_contraction {
                    v.flags.push("non-contraction".into());
                }
                if let Some(stream) = &stream {
                    let mut data = rng::stream(config.master_seed, Purpose::Data, &[n as u64, k as u64]);
                    let v_n = sgd::train_one_pass(stream, &schedule, &v0, &mut data)?;
                    v.excess = Some(sys.excess(&v_n)?);
                }
                Ok(v)
            })
            .collect())
    });

    let mut per_grid: Vec<Vec<TrialRow>> = vec![Vec::with_capacity(config.trials); grid.len()];
    for o in outcomes {
        match o.result {
            Ok(results) => {
                for ((rows, r), &n) in per_grid.iter_mut().zip(results).zip(grid) {
                    rows.push(row_from(o.trial, r, &format!("N = {n}")));
                }
            }
            Err(e) => {
                log::warn!("trial {} failed before training: {e}", o.trial);
                for rows in per_grid.iter_mut() {
                    rows.push(TrialRow {
                        trial: o.trial,
                        values: None,
                        failure: Some(failure_tag(&e).to_string()),
                    });
                }
            }
        }
    }
    let records = per_grid
        .into_iter()
        .zip(grid)
        .map(|(rows, &n)| {
            SweepRecord::from_rows(SweepAxis::Samples, n, rows, |rows| {
                let gammas: Vec<f64> = rows.iter().filter_map(|r| r.values.as_ref()?.gamma).collect();
                let mean_gamma = match config.gamma_policy {
                    GammaPolicy::Explicit(g) => g,
                    GammaPolicy::Auto if gammas.is_empty() => f64::NAN,
                    GammaPolicy::Auto => gammas.iter().sum::<f64>() / gammas.len() as f64,
                };
                sgd::n_eff(n) * mean_gamma
            })
        })
        .collect();
    Ok(SweepOutput::assemble(SweepAxis::Samples, records, &[Quantity::Excess, Quantity::Prediction]))
}

/// One full run: sample `(R, W*)`, train, decompose.
#[derive(Clone, Debug, Serialize)]
pub struct DecompositionRun {
    pub m: usize,
    pub n: usize,
    pub gamma: f64,
    pub n_eff: f64,
    pub decomposition: DecompositionReport,
    pub theory: TheoryReport,
    pub flags: Vec<String>,
}

pub fn decompose_single(config: &ExperimentConfig) -> Result<DecompositionRun> {
    config.validate()?;
    let g = config.covariance()?;
    let m = config.fixed_m;
    let (sys, attempts) = config.system(&g, m, 0)?;
    let gamma = config.gamma(&sys)?;
    let schedule = StepSchedule::new(gamma, config.fixed_n, config.schedule_mode)?;
    let v0 = SketchedModel::zeros(m, config.p);
    let stream = SketchedDataStream::from_system(&sys, config.sigma2)?;
    let mut data = rng::stream(config.master_seed, Purpose::Data, &[config.fixed_n as u64, 0]);
    let v_n = sgd::train_one_pass(&stream, &schedule, &v0, &mut data)?;
    let spec = SketchedSpectrum::from_gram(sys.gram())?;
    let theory = theory_report(&spec, &schedule, &v0, &sys.optimal(), sys.signal(), config.sigma2)?;
    let mut flags = Vec::new();
    if attempts > 0 {
        flags.push(format!("resampled:{attempts}"));
    }
    if theory.non_contraction {
        flags.push("non-contraction".into());
    }
    Ok(DecompositionRun {
        m,
        n: config.fixed_n,
        gamma,
        n_eff: schedule.n_eff(),
        decomposition: sys.decompose(&v_n, config.sigma2)?,
        theory,
        flags,
    })
}

/// Kernel experiment: m-sweep of the approximation error plus the
/// sketched-Gaussianity and residual checks and one SGD run.
#[derive(Clone, Debug, Serialize)]
pub struct KernelExperiment {
    pub feature_map: FeatureKind,
    pub sweep: SweepOutput,
    /// `None` for maps that are not Gaussian by construction.
    pub gaussianity_max_se: Option<f64>,
    pub residual: ResidualCheck,
    pub run: KernelRunReport,
}

pub fn feature_map_for(config: &ExperimentConfig) -> Result<FeatureMap> {
    Ok(match config.feature_map {
        FeatureKind::GaussianSynthetic => FeatureMap::gaussian_synthetic(config.covariance()?),
        FeatureKind::RandomFourier => FeatureMap::random_fourier(
            config.input_dim,
            config.d,
            config.bandwidth,
            rng::derive_seed(config.master_seed, Purpose::Feature, &[u64::MAX]),
        )?,
    })
}

pub fn run_kernel_experiment(config: &ExperimentConfig, threads: usize) -> Result<KernelExperiment> {
    config.validate()?;
    if config.p != 1 {
        return Err(Error::invalid("kernel experiments use scalar labels (p = 1)"));
    }
    let map = feature_map_for(config)?;
    let mut cov_rng = rng::stream(config.master_seed, Purpose::Feature, &[0]);
    let phi = map.covariance(kernel::EMPIRICAL_COVARIANCE_SAMPLES, &mut cov_rng)?;
    let flags: &[&str] = if map.satisfies_gaussianity() { &[] } else { &["assumptions-violated"] };
    let sweep_cfg = ExperimentConfig {
        sweep_axis: SweepAxis::SketchDim,
        ..config.clone()
    };
    let sweep = sweep_sketch_dim_with(&sweep_cfg, &phi, threads, flags)?;

    let w = config.parameter(config.d, 0)?;
    let check_r = config.sketch(config.kernel_check_m, config.d, 0, 0)?;
    let gaussianity_max_se = if map.satisfies_gaussianity() {
        let mut r = rng::stream(config.master_seed, Purpose::Check, &[0]);
        Some(kernel::verify_sketched_gaussianity(&map, &check_r, config.kernel_check_samples, &mut r)?)
    } else {
        None
    };
    let (sys_r, _) = {
        // the residual check and the SGD run share one conditioned sketch
        let mut chosen = None;
        for attempt in 0..SKETCH_ATTEMPTS {
            let r = config.sketch(config.fixed_m, config.d, 0, attempt)?;
            if SketchSystem::new(&r, &phi, &w).is_ok() {
                chosen = Some((r, attempt));
                break;
            }
        }
        chosen.ok_or(Error::IllConditioned { condition: f64::INFINITY })?
    };
    let mut r = rng::stream(config.master_seed, Purpose::Check, &[1]);
    let residual = kernel::residual_check(&map, &sys_r, &w, config.sigma2, config.kernel_check_samples, &mut r)?;
    let gamma = match config.gamma_policy {
        GammaPolicy::Auto => {
            let root = phi.sketch_root(sys_r.matrix())?;
            sgd::default_gamma(crate::linalg::frob2(&root), config.c0)?
        }
        GammaPolicy::Explicit(g) => g,
    };
    let schedule = StepSchedule::new(gamma, config.fixed_n, config.schedule_mode)?;
    let run = kernel::kernel_scaling_run(&map, &sys_r, &w, config.sigma2, &schedule, config.master_seed)?;
    Ok(KernelExperiment {
        feature_map: map.kind(),
        sweep,
        gaussianity_max_se,
        residual,
        run,
    })
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// `sweep.csv` contents: header plus one row per (grid point, trial).
pub fn sweep_csv(records: &[SweepRecord], axis: SweepAxis) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for rec in records {
        for row in &rec.rows {
            let _ = write!(out, "{},{},{}", axis.label(), rec.grid_value, row.trial);
            for q in [Quantity::Approx, Quantity::Excess, Quantity::Bias, Quantity::Variance, Quantity::DEff, Quantity::Rnr] {
                out.push(',');
                if let Some(v) = row.values.as_ref().and_then(|v| v.get(q)) {
                    out.push_str(&fmt_float(v));
                }
            }
            out.push(',');
            out.push_str(&row.flags().join(";"));
            out.push('\n');
        }
    }
    out
}

pub fn summary_json(output: &SweepOutput, config: &ExperimentConfig, extra: Option<serde_json::Value>) -> serde_json::Value {
    let aggregates: Vec<_> = output
        .records
        .iter()
        .map(|r| {
            json!({
                "grid_value": r.grid_value,
                "x_value": r.x_value,
                "trials": r.rows.len(),
                "failures": r.failures,
                "quantities": r.aggregates,
            })
        })
        .collect();
    let fits: Vec<_> = output
        .fits
        .iter()
        .map(|f| {
            json!({
                "quantity": f.quantity,
                "x": f.x,
                "slope": f.fit.slope,
                "intercept": f.fit.intercept,
                "r_squared": f.fit.r_squared,
                "slope_stderr": f.fit.slope_stderr,
            })
        })
        .collect();
    let per_grid: Vec<_> = output
        .records
        .iter()
        .map(|r| json!({"grid_value": r.grid_value, "failed": r.failures, "degraded": r.degraded()}))
        .collect();
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut v = json!({
        "version": RESULTS_VERSION,
        "config": config,
        "axis": output.axis,
        "schedule": {
            "mode": config.schedule_mode,
            "n_eff": "N / max(1, ln N)",
            "stage_count": "max(1, ceil(log2 N))",
        },
        "seeds": {"master_seed": config.master_seed},
        "fits": fits,
        "aggregates": aggregates,
        "failures": {"total": output.failures(), "per_grid": per_grid, "degraded": output.degraded},
        "metadata": {"created_unix": created},
    });
    if let Some(extra) = extra {
        v["kernel"] = extra;
    }
    v
}

/// Write `sweep.csv` and `summary.json` into `dir`, creating it if needed.
pub fn emit_results(output: &SweepOutput, config: &ExperimentConfig, dir: &Path, extra: Option<serde_json::Value>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("sweep.csv");
    fs::write(&csv_path, sweep_csv(&output.records, output.axis)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("summary.json");
    let body = serde_json::to_string_pretty(&summary_json(output, config, extra))?;
    fs::write(&json_path, body + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}
