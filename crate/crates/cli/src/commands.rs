use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use sketchlaw::experiments::{self, PresetTarget, Quantity, SweepAxis, SweepOutput};
use sketchlaw::kernel::FeatureKind;
use sketchlaw::sgd;
use sketchlaw::theory;
use sketchlaw::verify;
use sketchlaw::Error;

use crate::config::{resolve, threads};
use crate::{Command, Common, Status};

#[derive(Debug)]
pub struct CliError {
    status: Status,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            status: Status::ConfigError,
            message: message.into(),
        }
    }

    pub fn from_config(e: Error) -> Self {
        CliError::config(e.to_string())
    }

    pub fn status(&self) -> Status {
        self.status
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Bad input maps to exit 2; numerical failures of a run map to exit 1.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::Io { .. } | Error::Json(_) => Status::ConfigError,
            _ => Status::VerificationFailed,
        };
        CliError {
            status,
            message: e.to_string(),
        }
    }
}

pub fn run(command: Command) -> Result<Status, CliError> {
    match command {
        Command::Verify { common, inject_fault } => cmd_verify(&common, inject_fault.as_deref()),
        Command::Decompose { common, zero_signal } => cmd_decompose(&common, zero_signal),
        Command::SweepM { common } => cmd_sweep(&common, SweepAxis::SketchDim, false),
        Command::SweepN { common, theory_only } => cmd_sweep(&common, SweepAxis::Samples, theory_only),
        Command::Kernel { common, feature_map } => cmd_kernel(&common, feature_map.as_deref()),
        Command::Predict {
            a,
            m,
            sigma2,
            gamma,
            n,
            n_eff,
        } => cmd_predict(a, m, sigma2, gamma, n, n_eff),
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let body = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))? + "\n";
    fs::write(&path, body).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn progress(common: &Common, msg: impl fmt::Display) {
    if !common.quiet {
        eprintln!("{msg}");
    }
}

fn cmd_verify(common: &Common, fault: Option<&str>) -> Result<Status, CliError> {
    let seed = common.seed.unwrap_or(0);
    prepare_out(&common.out)?;
    progress(common, format_args!("running {} checks (seed {seed})", verify::CHECK_NAMES.len()));
    let report = verify::run_verification(seed, fault)?;
    let width = verify::CHECK_NAMES.iter().map(|n| n.len()).max().unwrap_or(0);
    for c in &report.checks {
        println!("{:<width$}  {}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
    }
    write_json(&common.out, "verify.json", &serde_json::to_value(&report).map_err(|e| CliError::config(e.to_string()))?)?;
    if report.passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(Status::Ok)
    } else {
        let names: Vec<_> = report.failed().map(|c| c.name).collect();
        println!("failed: {}", names.join(", "));
        Ok(Status::VerificationFailed)
    }
}

fn cmd_decompose(common: &Common, zero_signal: bool) -> Result<Status, CliError> {
    let mut cfg = resolve(common, PresetTarget::Decompose)?;
    cfg.zero_parameter |= zero_signal;
    prepare_out(&common.out)?;
    progress(common, format_args!("decompose: d = {}, m = {}, p = {}, N = {}", cfg.d, cfg.fixed_m, cfg.p, cfg.fixed_n));
    let run = experiments::decompose_single(&cfg)?;
    let d = &run.decomposition;
    println!("irreducible  {:.10e}", d.irreducible);
    println!("approx       {:.10e}", d.approx);
    println!("excess       {:.10e}", d.excess);
    println!("total        {:.10e}", d.total);
    println!("bias {:.4e}  variance {:.4e}  d_eff {:.3}  gamma {:.4e}  n_eff {:.1}", run.theory.bias, run.theory.variance, run.theory.d_eff, run.gamma, run.n_eff);
    let body = json!({
        "version": experiments::RESULTS_VERSION,
        "config": cfg,
        "run": run,
    });
    let path = write_json(&common.out, "decomposition.json", &body)?;
    progress(common, format_args!("wrote {}", path.display()));
    Ok(Status::Ok)
}

fn print_sweep(out: &SweepOutput) {
    let shown: &[Quantity] = match out.axis {
        SweepAxis::SketchDim => &[Quantity::Approx],
        SweepAxis::Samples => &[Quantity::Excess, Quantity::Prediction],
    };
    for rec in &out.records {
        let mut line = format!("{} = {:>7}", if out.axis == SweepAxis::SketchDim { "m" } else { "N" }, rec.grid_value);
        for &q in shown {
            if let Some(a) = rec.aggregates.get(q.name()) {
                line += &format!("  {} {:.4e} ± {:.1e}", q.name(), a.mean, a.stderr);
            }
        }
        if rec.failures > 0 {
            line += &format!("  failed {}/{}", rec.failures, rec.rows.len());
        }
        println!("{line}");
    }
    for f in &out.fits {
        println!(
            "slope[{} vs {}] = {:.4} ± {:.4}  (r² = {:.4})",
            f.quantity, f.x, f.fit.slope, f.fit.slope_stderr, f.fit.r_squared
        );
    }
}

fn finish_sweep(common: &Common, out: &SweepOutput) -> Status {
    if out.degraded {
        eprintln!("sweep degraded: more than 25% of trials failed at some grid point ({} failures in total)", out.failures());
        Status::Degraded
    } else {
        progress(common, format_args!("wrote {}", common.out.display()));
        Status::Ok
    }
}

fn cmd_sweep(common: &Common, axis: SweepAxis, theory_only: bool) -> Result<Status, CliError> {
    let target = match axis {
        SweepAxis::SketchDim => PresetTarget::SweepM,
        SweepAxis::Samples => PresetTarget::SweepN,
    };
    let mut cfg = resolve(common, target)?;
    cfg.sweep_axis = axis;
    cfg.theory_only |= theory_only;
    let threads = threads(common)?;
    prepare_out(&common.out)?;
    progress(
        common,
        format_args!("{}: d = {}, a = {}, grid {:?}, {} trials, {threads} threads", axis.label(), cfg.d, cfg.a, cfg.grid, cfg.trials),
    );
    let out = match axis {
        SweepAxis::SketchDim => experiments::sweep_sketch_dim(&cfg, threads)?,
        SweepAxis::Samples => experiments::sweep_samples(&cfg, threads)?,
    };
    print_sweep(&out);
    experiments::emit_results(&out, &cfg, &common.out, None)?;
    Ok(finish_sweep(common, &out))
}

fn cmd_kernel(common: &Common, feature_map: Option<&str>) -> Result<Status, CliError> {
    let mut cfg = resolve(common, PresetTarget::Kernel)?;
    if let Some(kind) = feature_map {
        cfg.feature_map = serde_json::from_value(json!(kind))
            .map_err(|_| CliError::config(format!("unknown feature map {kind:?}; expected gaussian-synthetic or random-fourier")))?;
    }
    let threads = threads(common)?;
    prepare_out(&common.out)?;
    progress(
        common,
        format_args!("kernel: {:?} map, p = {}, grid {:?}, {} trials", cfg.feature_map, cfg.d, cfg.grid, cfg.trials),
    );
    let ex = experiments::run_kernel_experiment(&cfg, threads)?;
    print_sweep(&ex.sweep);
    let mut checks_ok = true;
    if let Some(z) = ex.gaussianity_max_se {
        let ok = z <= 4.0;
        checks_ok &= ok;
        println!("sketched covariance: max deviation {z:.2} SE  {}", if ok { "PASS" } else { "FAIL" });
    }
    let z = ex.residual.z_score();
    let residual_ok = z <= 3.0;
    if cfg.feature_map == FeatureKind::GaussianSynthetic {
        checks_ok &= residual_ok;
    }
    println!(
        "residual: monte carlo {:.6e} ± {:.1e}, sigma² + approx {:.6e} ({z:.2} SE)  {}",
        ex.residual.monte_carlo,
        ex.residual.stderr,
        ex.residual.closed_form,
        if residual_ok { "PASS" } else { "FAIL" }
    );
    if ex.run.assumptions_violated {
        println!("note: feature map is not Gaussian; the Gaussian analysis does not apply");
    }
    let extra = json!({
        "feature_map": ex.feature_map,
        "gaussianity_max_se": ex.gaussianity_max_se,
        "residual": {
            "monte_carlo": ex.residual.monte_carlo,
            "stderr": ex.residual.stderr,
            "closed_form": ex.residual.closed_form,
            "z": z,
        },
        "run": ex.run,
    });
    experiments::emit_results(&ex.sweep, &cfg, &common.out, Some(extra))?;
    let status = finish_sweep(common, &ex.sweep);
    if status == Status::Ok && !checks_ok {
        return Ok(Status::VerificationFailed);
    }
    Ok(status)
}

fn cmd_predict(a: f64, m: f64, sigma2: f64, gamma: f64, n: Option<usize>, n_eff: Option<f64>) -> Result<Status, CliError> {
    let n_eff = match (n, n_eff) {
        (Some(n), _) => sgd::n_eff(n),
        (None, Some(v)) => v,
        (None, None) => return Err(CliError::config("one of --n or --n-eff is required")),
    };
    let p = theory::theoretical_scaling(m, n_eff, gamma, a, sigma2).map_err(CliError::from_config)?;
    println!("irreducible  {}", p.irreducible);
    println!("approx       {}", p.approx_term);
    println!("excess       {}", p.excess_term);
    println!("total        {}", p.total);
    Ok(Status::Ok)
}
