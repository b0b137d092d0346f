use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use sketchlaw::regression::{self, SketchSystem, SketchedModel};
use sketchlaw::rng::{self, Purpose};
use sketchlaw::sampling::{self, ParameterMatrix, SketchMatrix, SketchedDataStream};
use sketchlaw::sgd::{self, StepSchedule};
use sketchlaw::spectrum::{random_rotation, Covariance};
use sketchlaw::theory::{self, SketchedSpectrum};

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(32)
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::seeded(seed);
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn power_law_ratio(d in 2usize..300, a in 1.01f64..4.0, scale in 0.1f64..10.0) {
        let g = Covariance::power_law(d, a, scale).unwrap();
        let l = g.eigenvalues();
        for i in 1..d {
            let want = ((i as f64 + 1.0) / i as f64).powf(a);
            let got = l[i - 1] / l[i];
            prop_assert!((got - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn trace_survives_rotation(d in 1usize..24, a in 1.1f64..3.0, seed in any::<u64>()) {
        let g = Covariance::power_law(d, a, 1.0).unwrap();
        let sum: f64 = g.eigenvalues().iter().sum();
        let dense = g.clone().rotated(seed).unwrap().dense();
        prop_assert!((dense.trace() - sum).abs() <= 1e-12 * sum);
        prop_assert!((g.trace() - sum).abs() <= 1e-12 * sum);
    }

    #[test]
    fn approx_is_rotation_invariant(d in 3usize..16, m in 1usize..4, p in 1usize..3, seed in any::<u64>()) {
        let m = m.min(d - 1);
        let g = Covariance::power_law(d, 2.0, 1.0).unwrap();
        let r = SketchMatrix::draw(m, d, seed).unwrap();
        let w = ParameterMatrix::draw(d, p, seed ^ 1).unwrap();
        let base = regression::approx_error(&r, &g, &w).unwrap();
        let signal = g.norm2(w.matrix()).unwrap();

        let u = random_rotation(d, seed ^ 2).unwrap();
        let gu = g.with_rotation(u.clone()).unwrap();
        let ru = SketchMatrix::from_matrix(r.matrix() * u.transpose());
        let wu = ParameterMatrix::from_matrix(&u * w.matrix());
        let rotated = regression::approx_error(&ru, &gu, &wu).unwrap();
        prop_assert!((rotated - base).abs() <= 1e-8 * base + 1e-14 * signal, "{} vs {}", rotated, base);
    }

    #[test]
    fn square_sketch_leaves_no_approx_error(d in 2usize..12, p in 1usize..3, seed in any::<u64>()) {
        let g = Covariance::power_law(d, 2.0, 1.0).unwrap().rotated(seed).unwrap();
        let r = SketchMatrix::draw(d, d, seed ^ 1).unwrap();
        let w = ParameterMatrix::draw(d, p, seed ^ 2).unwrap();
        if let Ok(sys) = SketchSystem::new(&r, &g, &w) {
            prop_assert!(sys.approx() <= 1e-9);
        }
    }

    #[test]
    fn approx_between_zero_and_signal(d in 2usize..20, m in 1usize..8, p in 1usize..4, seed in any::<u64>(), rotate in any::<bool>()) {
        let m = m.min(d);
        let mut g = Covariance::power_law(d, 1.5, 1.0).unwrap();
        if rotate {
            g = g.rotated(seed).unwrap();
        }
        let r = SketchMatrix::draw(m, d, seed ^ 7).unwrap();
        let w = ParameterMatrix::draw(d, p, seed ^ 9).unwrap();
        let sys = SketchSystem::new(&r, &g, &w).unwrap();
        prop_assert!(sys.approx() >= 0.0);
        prop_assert!(sys.approx() <= sys.signal());
    }

    #[test]
    fn pythagorean_identity(d in 2usize..12, m in 1usize..6, p in 1usize..4, seed in any::<u64>(), sigma2 in 0.0f64..3.0) {
        let m = m.min(d);
        let g = Covariance::power_law(d, 2.0, 1.0).unwrap().rotated(seed).unwrap();
        let r = SketchMatrix::draw(m, d, seed ^ 3).unwrap();
        let w = ParameterMatrix::draw(d, p, seed ^ 5).unwrap();
        let sys = SketchSystem::new(&r, &g, &w).unwrap();
        let v = SketchedModel::from_matrix(gaussian(m, p, seed ^ 11));
        let lhs = regression::sketched_risk(&v, &r, &g, &w, sigma2).unwrap();
        let rhs = sigma2 + sys.approx() + sys.excess(&v).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1e-300));
    }

    #[test]
    fn optimum_is_stationary(d in 2usize..12, m in 1usize..6, seed in any::<u64>(), log_scale in -3.0f64..-1.0) {
        let m = m.min(d);
        let g = Covariance::power_law(d, 2.0, 1.0).unwrap();
        let r = SketchMatrix::draw(m, d, seed).unwrap();
        let w = ParameterMatrix::draw(d, 2, seed ^ 1).unwrap();
        let sys = SketchSystem::new(&r, &g, &w).unwrap();
        let best = sys.optimal();
        let base = sys.sketched_risk(&best, 1.0).unwrap();
        let delta = gaussian(m, 2, seed ^ 2) * 10f64.powf(log_scale);
        let moved = SketchedModel::from_matrix(best.matrix() + delta);
        prop_assert!(sys.sketched_risk(&moved, 1.0).unwrap() >= base);
    }

    #[test]
    fn label_scaling_is_equivariant(m in 1usize..5, p in 1usize..3, n in 1usize..40, kappa in -3.0f64..3.0, seed in any::<u64>()) {
        let schedule = StepSchedule::step_decay(0.05, n).unwrap();
        let v0 = SketchedModel::zeros(m, p);
        let run = |k: f64| {
            let mut r = rng::seeded(seed);
            sgd::train_from_source(&schedule, &v0, |z, y| {
                for v in z.iter_mut() {
                    *v = r.sample(StandardNormal);
                }
                for v in y.iter_mut() {
                    *v = k * r.sample::<f64, _>(StandardNormal);
                }
            })
            .unwrap()
        };
        let base = run(1.0);
        let scaled = run(kappa);
        for (a, b) in base.matrix().iter().zip(scaled.matrix().iter()) {
            prop_assert!((a * kappa - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn effective_dimension_monotone(m in 1usize..20, seed in any::<u64>(), gamma in 0.01f64..1.0) {
        let g = Covariance::power_law(24, 1.7, 1.0).unwrap();
        let r = SketchMatrix::draw(m, 24, seed).unwrap();
        let spec = theory::sketched_eigs(&r, &g).unwrap();
        let mut prev = 0.0f64;
        for i in 0..400 {
            let n_eff = 1.05f64.powi(i);
            let (d_eff, _) = theory::variance_term(&spec, n_eff, gamma).unwrap();
            prop_assert!(d_eff >= prev - 1e-12 * prev.max(1.0));
            prev = d_eff;
        }
    }

    #[test]
    fn bias_decreases_under_constant_steps(m in 1usize..6, seed in any::<u64>(), frac in 0.05f64..0.95) {
        let d = 10;
        let g = Covariance::power_law(d, 2.0, 1.0).unwrap();
        let r = SketchMatrix::draw(m, d, seed).unwrap();
        let w = ParameterMatrix::draw(d, 1, seed ^ 4).unwrap();
        let sys = SketchSystem::new(&r, &g, &w).unwrap();
        let spec = SketchedSpectrum::from_gram(sys.gram()).unwrap();
        let gamma = frac / spec.top();
        let v0 = SketchedModel::zeros(m, 1);
        let mut prev = f64::INFINITY;
        for n in 0..80 {
            let s = StepSchedule::constant(gamma, n).unwrap();
            let b = theory::bias_term(&spec, &s, &v0, &sys.optimal()).unwrap();
            prop_assert!(!b.non_contraction);
            prop_assert!(b.value <= prev * (1.0 + 1e-12));
            prev = b.value;
        }
    }

    #[test]
    fn aggregates_match_trial_values(vals in proptest::collection::vec(1e-6f64..10.0, 1..40)) {
        let a = sketchlaw::experiments::Aggregate::of(&vals).unwrap();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        prop_assert!((a.mean - mean).abs() <= 1e-12 * mean);
        if vals.len() > 1 {
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
            prop_assert!((a.stderr - sd / (vals.len() as f64).sqrt()).abs() <= 1e-12 * (1.0 + sd));
        }
    }

    #[test]
    fn fit_is_well_formed(ys in proptest::collection::vec(1e-3f64..1e3, 3..12)) {
        let xs: Vec<f64> = (0..ys.len()).map(|i| 2f64.powi(i as i32)).collect();
        let f = sketchlaw::experiments::fit_loglog(&xs, &ys).unwrap();
        prop_assert!((0.0..=1.0).contains(&f.r_squared));
        let mean: f64 = f.residuals.iter().sum::<f64>() / f.residuals.len() as f64;
        prop_assert!(mean.abs() <= 1e-10);
    }
}

#[test]
fn effective_dimension_grows_like_inverse_exponent() {
    for a in [1.5, 2.0, 3.0] {
        let d = 200_000;
        let lambdas: Vec<f64> = (1..=d).map(|i| (i as f64).powf(-a)).collect();
        // too large for a dense eigensolve; the definition is evaluated on the diagonal
        let d_eff = |h: f64| {
            let tau = 1.0 / h;
            lambdas.iter().map(|&l| if l >= tau { 1.0 } else { h * h * l * l }).sum::<f64>()
        };
        let xs: Vec<f64> = (0..=30).map(|i| 10f64.powf(1.0 + 3.0 * i as f64 / 30.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|&h| d_eff(h)).collect();
        let f = sketchlaw::experiments::fit_loglog(&xs, &ys).unwrap();
        assert!((f.slope - 1.0 / a).abs() <= 0.05, "a = {a}: slope {}", f.slope);
    }
}

#[test]
fn identity_sketch_effective_dimension_matches_library() {
    let d = 256;
    let g = Covariance::power_law(d, 2.0, 1.0).unwrap();
    let spec = theory::sketched_eigs(&SketchMatrix::identity(d), &g).unwrap();
    for (got, want) in spec.values().iter().zip(g.eigenvalues()) {
        assert!((got - want).abs() <= 1e-12);
    }
    let xs: Vec<f64> = (0..=20).map(|i| 10f64.powf(0.5 + 2.0 * i as f64 / 20.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|&h| theory::variance_term(&spec, h, 1.0).unwrap().0).collect();
    let f = sketchlaw::experiments::fit_loglog(&xs, &ys).unwrap();
    assert!((f.slope - 0.5).abs() <= 0.05, "slope {}", f.slope);
}

#[test]
fn joint_and_materialized_samplers_agree() {
    let (d, m, p) = (12, 4, 2);
    let sigma2 = 0.8;
    let g = Covariance::power_law(d, 2.0, 1.0).unwrap().rotated(5).unwrap();
    let r = SketchMatrix::draw(m, d, 6).unwrap();
    let w = ParameterMatrix::draw(d, p, 7).unwrap();
    let stream = SketchedDataStream::build(&r, &g, &w, sigma2).unwrap();
    let n = 100_000;
    let k = m + p;
    let moments = |draw: &mut dyn FnMut() -> Vec<f64>| {
        let mut mean = vec![0.0; k];
        let mut second = vec![vec![0.0; k * k]; 2];
        for _ in 0..n {
            let v = draw();
            for i in 0..k {
                mean[i] += v[i];
                for j in 0..k {
                    let x = v[i] * v[j];
                    second[0][i * k + j] += x;
                    second[1][i * k + j] += x * x;
                }
            }
        }
        (mean, second)
    };
    let mut ra = rng::stream(1, Purpose::Data, &[0]);
    let (mean_a, sec_a) = moments(&mut || {
        let (z, y) = stream.sample_pair(&mut ra);
        z.iter().chain(y.iter()).copied().collect()
    });
    let mut rb = rng::stream(1, Purpose::Data, &[1]);
    let (mean_b, sec_b) = moments(&mut || {
        let (z, y) = sampling::sample_materialized(&r, &g, &w, sigma2, &mut rb);
        z.iter().chain(y.iter()).copied().collect()
    });
    let nf = n as f64;
    for i in 0..k {
        // the second-moment diagonal bounds each coordinate's variance
        let var = sec_a[0][i * k + i] / nf;
        let se = (2.0 * var / nf).sqrt();
        assert!((mean_a[i] - mean_b[i]).abs() / nf <= 4.0 * se, "mean {i}");
    }
    for e in 0..k * k {
        let (ma, mb) = (sec_a[0][e] / nf, sec_b[0][e] / nf);
        let va = sec_a[1][e] / nf - ma * ma;
        let vb = sec_b[1][e] / nf - mb * mb;
        let se = ((va + vb) / nf).sqrt();
        assert!((ma - mb).abs() <= 4.0 * se, "entry {e}: {ma} vs {mb} (se {se})");
    }
}

#[test]
fn conditional_mean_is_linear_in_the_sketch() {
    // E[y | z] = V*^T z  <=>  Cov(y - V*^T z, z) = 0
    let g = Covariance::power_law(10, 2.0, 1.0).unwrap().rotated(2).unwrap();
    let r = SketchMatrix::draw(3, 10, 3).unwrap();
    let w = ParameterMatrix::draw(10, 2, 4).unwrap();
    let sys = SketchSystem::new(&r, &g, &w).unwrap();
    let v = sys.optimal();
    let cross_resid = sys.cross() - sys.gram() * v.matrix();
    assert!(sketchlaw::linalg::max_abs(&cross_resid) < 1e-12);
    assert_eq!(regression::full_risk(w.matrix(), &g, &w, 0.37).unwrap(), 0.37);
}

#[test]
fn default_step_never_diverges() {
    let g = Covariance::power_law(256, 2.0, 1.0).unwrap();
    let cfg = sketchlaw::experiments::ExperimentConfig::default();
    let outcomes = sketchlaw::trials::run_trials(256, 1, |k| {
        let r = SketchMatrix::draw(32, 256, k as u64).unwrap();
        let w = ParameterMatrix::draw(256, 2, 1000 + k as u64).unwrap();
        let sys = SketchSystem::new(&r, &g, &w)?;
        let gamma = sgd::default_gamma_for(&sys, cfg.c0)?;
        let s = StepSchedule::step_decay(gamma, 500)?;
        let stream = SketchedDataStream::from_system(&sys, 1.0)?;
        let mut data = rng::stream(0, Purpose::Data, &[k as u64]);
        sgd::train_one_pass(&stream, &s, &SketchedModel::zeros(32, 2), &mut data)
    });
    assert!(outcomes.iter().all(|o| o.result.is_ok()));
}

#[test]
fn approximation_floor_against_tail_mass() {
    let d = 1024;
    let m = 64;
    let g = Covariance::power_law(d, 2.0, 1.0).unwrap();
    let r = SketchMatrix::draw(m, d, 21).unwrap();
    let mean: f64 = (0..64)
        .map(|k| {
            let w = ParameterMatrix::draw(d, 2, 500 + k).unwrap();
            SketchSystem::new(&r, &g, &w).unwrap().approx()
        })
        .sum::<f64>()
        / 64.0;
    assert!(mean > 0.1 * g.tail_sum(m), "{mean} vs tail {}", g.tail_sum(m));
}
