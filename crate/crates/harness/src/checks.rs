//! The gradient battery and self-test commands.

use std::fmt::Write as _;

use cvi::battery::{gaussian_battery, quadrature_fd_oracle};
use cvi::cvi::{run_cvi, CviConfig, StepSchedule};
use cvi::expfam::{bregman_dual, kl, nat_to_mean, NatParams};
use cvi::gradients::{fisher_solve_grad, gamma_grad_exact, gauss_grad_exact, gauss_grad_mean, GradMode, ScalarFn, ScalarFunction};
use cvi::models::{build_blr, build_gaussian_linreg, Likelihood, NonConjugateFactor, Target};
use cvi::par::Parallelism;
use cvi::rng::{substream, Stream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{parse_libsvm, write_libsvm, SparseRow};
use crate::metrics::log_loss;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest relative error against the check's reference.
    pub max_rel_err: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(out, "{status}  {:<w$}  max_rel_err={:.3e}  {}", c.name, c.max_rel_err, c.detail).unwrap();
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        writeln!(out, "{} checks, {failed} failed", self.checks.len()).unwrap();
        out
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// f' against central differences of f, and f'' against central differences of f', at each point.
/// Errors are relative to max(|reference|, 1).
pub fn derivative_check(name: &str, f: &dyn ScalarFunction, points: &[f64]) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut bad = None;
    for &z in points {
        let h = 1e-5 * z.abs().max(1.0);
        let fd1 = (f.value(z + h) - f.value(z - h)) / (2.0 * h);
        let fd2 = (f.d1(z + h) - f.d1(z - h)) / (2.0 * h);
        let (d1, d2) = f.d1_d2(z);
        for (got, want) in [(d1, fd1), (d2, fd2), (f.d1(z), fd1)] {
            let err = (got - want).abs() / want.abs().max(1.0);
            worst = worst.max(err);
            if !(err <= 1e-6) && bad.is_none() {
                bad = Some(format!("at z={z}: {got} vs finite difference {want}"));
            }
        }
    }
    CheckResult {
        name: name.to_string(),
        passed: bad.is_none(),
        max_rel_err: worst,
        detail: bad.unwrap_or_else(|| format!("{} points", points.len())),
    }
}

fn likelihood_cases() -> Vec<(String, NonConjugateFactor, Vec<f64>)> {
    let grid: Vec<f64> = (0..20).map(|i| -6.0 + 12.0 * i as f64 / 19.0).collect();
    let pos: Vec<f64> = (0..20).map(|i| 0.2 + 6.0 * i as f64 / 19.0).collect();
    let mut out = Vec::new();
    for (lik, ys, pts) in [
        (Likelihood::BernoulliLogit, [0.0, 1.0], &grid),
        (Likelihood::BernoulliProbit, [0.0, 1.0], &grid),
        (Likelihood::GammaShape, [0.4, 2.5], &pos),
    ] {
        for y in ys {
            let f = NonConjugateFactor::new(Target::Scalar, lik, y).expect("valid label");
            out.push((format!("d/dz {} y={y}", lik.name()), f, pts.clone()));
        }
    }
    out
}

/// Estimator cross-check on one Gaussian case: the reparameterisation and Fisher-solve
/// estimates each within 3 SE of the quadrature finite-difference oracle and within 3
/// combined SE of each other, and the quadrature estimator within 1e-5 of the oracle.
pub fn estimator_check(name: &str, f: &dyn ScalarFunction, q: &NatParams, samples: usize, seed: u64, case: u64) -> CheckResult {
    let run = || -> cvi::Result<CheckResult> {
        let oracle = quadrature_fd_oracle(f, q)?;
        let a = gauss_grad_mean(f, q, samples, &mut substream(seed, Stream::Test, case, 0))?;
        let b = fisher_solve_grad(f, q, samples, &mut substream(seed, Stream::Test, case, 1))?;
        let e = gauss_grad_exact(f, q)?;
        let mut worst: f64 = 0.0;
        let mut bad = Vec::new();
        for k in 0..2 {
            let (sa, sb) = (a.std_err[k], b.std_err[k]);
            let slack = 1e-7 * oracle[k].abs().max(1.0);
            if (a.g[k] - oracle[k]).abs() > 3.0 * sa + slack {
                bad.push(format!("reparam[{k}]"));
            }
            if (b.g[k] - oracle[k]).abs() > 3.0 * sb + slack {
                bad.push(format!("fisher[{k}]"));
            }
            if (a.g[k] - b.g[k]).abs() > 3.0 * (sa * sa + sb * sb).sqrt() + slack {
                bad.push(format!("pair[{k}]"));
            }
            if (e.g[k] - oracle[k]).abs() > 1e-5 * oracle[k].abs().max(1.0) {
                bad.push(format!("exact[{k}]"));
            }
            for est in [&a.g, &b.g, &e.g] {
                worst = worst.max(rel(est[k], oracle[k]));
            }
        }
        Ok(CheckResult {
            name: name.to_string(),
            passed: bad.is_empty(),
            max_rel_err: worst,
            detail: if bad.is_empty() { format!("S={samples}") } else { format!("outside band: {}", bad.join(" ")) },
        })
    };
    run().unwrap_or_else(|e| CheckResult { name: name.to_string(), passed: false, max_rel_err: f64::NAN, detail: e.to_string() })
}

fn gamma_estimator_check(name: &str, f: &dyn ScalarFunction, q: &NatParams, samples: usize, seed: u64, case: u64) -> CheckResult {
    let run = || -> cvi::Result<CheckResult> {
        let exact = gamma_grad_exact(f, q)?;
        let est = fisher_solve_grad(f, q, samples, &mut substream(seed, Stream::Test, case, 0))?;
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for k in 0..2 {
            worst = worst.max(rel(est.g[k], exact.g[k]));
            ok &= (est.g[k] - exact.g[k]).abs() <= 3.0 * est.std_err[k] + 1e-7 * exact.g[k].abs().max(1.0);
        }
        Ok(CheckResult { name: name.to_string(), passed: ok, max_rel_err: worst, detail: format!("S={samples}") })
    };
    run().unwrap_or_else(|e| CheckResult { name: name.to_string(), passed: false, max_rel_err: f64::NAN, detail: e.to_string() })
}

/// Every finite-difference and cross-estimator check.
pub fn check_gradients(samples: usize, seed: u64) -> Report {
    let mut report = Report::default();
    for (name, f, pts) in likelihood_cases() {
        report.checks.push(derivative_check(&name, &f, &pts));
    }
    for (i, case) in gaussian_battery().iter().enumerate() {
        report.checks.push(estimator_check(&format!("estimators {}", case.name), case.f.as_ref(), &case.q, samples, seed, i as u64));
    }
    let gamma_cases: Vec<(&str, Box<dyn ScalarFunction>, NatParams)> = vec![
        ("gamma-shape", Box::new(NonConjugateFactor::new(Target::Scalar, Likelihood::GammaShape, 1.3).expect("valid")), NatParams::gamma(3.0, 2.0).expect("valid")),
        ("sqrt", Box::new(ScalarFn::new(f64::sqrt, |z: f64| 0.5 / z.sqrt())), NatParams::gamma(4.0, 1.0).expect("valid")),
        ("log1p", Box::new(ScalarFn::new(f64::ln_1p, |z| 1.0 / (1.0 + z))), NatParams::gamma(1.5, 0.5).expect("valid")),
    ];
    for (i, (name, f, q)) in gamma_cases.iter().enumerate() {
        report.checks.push(gamma_estimator_check(&format!("gamma estimators {name}"), f.as_ref(), q, samples, seed, 100 + i as u64));
    }
    report
}

fn check(name: &str, passed: bool, max_rel_err: f64, detail: impl Into<String>) -> CheckResult {
    CheckResult { name: name.to_string(), passed, max_rel_err, detail: detail.into() }
}

fn bregman_check(seed: u64) -> CheckResult {
    let mut rng = substream(seed, Stream::Test, 900, 0);
    let mut worst: f64 = 0.0;
    for i in 0..400 {
        let pair = if i % 2 == 0 {
            let mut g = || NatParams::gaussian(rng.random_range(-3.0..3.0), rng.random_range(0.1..4.0));
            (g(), g())
        } else {
            let mut g = || NatParams::gamma(rng.random_range(0.3..20.0), rng.random_range(0.2..10.0));
            (g(), g())
        };
        let (Ok(a), Ok(b)) = pair else { return check("bregman-equals-kl", false, f64::NAN, "bad random params") };
        let d = nat_to_mean(&a).and_then(|ma| nat_to_mean(&b).and_then(|mb| bregman_dual(&ma, &mb)));
        match (d, kl(&a, &b)) {
            (Ok(d), Ok(k)) => worst = worst.max((d - k).abs() / k.abs().max(1.0)),
            (Err(e), _) | (_, Err(e)) => return check("bregman-equals-kl", false, f64::NAN, e.to_string()),
        }
    }
    check("bregman-equals-kl", worst <= 1e-9, worst, "400 random pairs")
}

fn exact_recovery_check(seed: u64) -> CheckResult {
    let mut rng = substream(seed, Stream::Test, 901, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (n, d) = (rng.random_range(2..8), rng.random_range(1..4));
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (delta, noise) = (rng.random_range(0.5..3.0), rng.random_range(0.2..2.0));
        let Ok(model) = build_gaussian_linreg(&x, &y, delta, noise) else { return check("exact-recovery", false, f64::NAN, "model build failed") };
        let cfg = CviConfig { schedule: StepSchedule::Constant(1.0), grad_mode: GradMode::Exact, max_iters: 1, record_time: false, ..CviConfig::default() };
        let run = match run_cvi(&model, &cfg, None) {
            Ok(r) => r,
            Err(e) => return check("exact-recovery", false, f64::NAN, e.to_string()),
        };
        let xt = cvi::models::with_bias(&x);
        let prec = xt.transpose() * &xt / noise + DMatrix::identity(d + 1, d + 1) / delta;
        let Some(v) = prec.try_inverse() else { return check("exact-recovery", false, f64::NAN, "singular oracle") };
        let m = &v * (xt.transpose() * DVector::from_vec(y)) / noise;
        let cvi::conjugate::Posterior::LinReg(q) = &run.posterior else { unreachable!() };
        let scale = m.amax().max(v.amax()).max(1.0);
        worst = worst.max((q.mean() - &m).amax() / scale).max((q.covariance() - &v).amax() / scale);
    }
    check("exact-recovery", worst <= 1e-10, worst, "10 conjugate-disguised models, one step at beta=1")
}

fn libsvm_round_trip_check(seed: u64) -> CheckResult {
    let mut rng = substream(seed, Stream::Test, 902, 0);
    let rows: Vec<SparseRow> = (0..50)
        .map(|_| {
            let mut entries = Vec::new();
            for j in 0..30 {
                if rng.random_bool(0.2) {
                    entries.push((j, rng.random_range(-5.0..5.0)));
                }
            }
            SparseRow { label: if rng.random_bool(0.5) { 1.0 } else { 0.0 }, entries }
        })
        .collect();
    let ok = parse_libsvm(&write_libsvm(&rows), "round-trip").is_ok_and(|back| back == rows);
    check("libsvm-round-trip", ok, 0.0, "50 random sparse rows")
}

fn log_loss_check() -> CheckResult {
    let cases = [(0.5, 1.0, 1.0), (0.5, 0.0, 1.0), (0.25, 1.0, 2.0), (1.0, 1.0, 0.0)];
    let worst = cases.iter().map(|&(p, y, want)| (log_loss(p, y) - want).abs()).fold(0.0, f64::max);
    check("log-loss-examples", worst < 1e-10, worst, "coin toss, certain, quarter")
}

fn determinism_check(seed: u64) -> CheckResult {
    let mut rng = substream(seed, Stream::Test, 903, 0);
    let x = DMatrix::from_fn(40, 3, |_, _| rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..40).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let Ok(model) = build_blr(&x, &y, 1.0) else { return check("determinism", false, f64::NAN, "model build failed") };
    let cfg = |p| CviConfig { max_iters: 15, seed, record_time: false, track_elbo: true, parallelism: p, ..CviConfig::default() };
    let runs: Vec<_> = [Parallelism::Sequential, Parallelism::Sequential, Parallelism::Rayon]
        .into_iter()
        .map(|p| run_cvi(&model, &cfg(p), None).map(|r| r.trace))
        .collect();
    match (&runs[0], &runs[1], &runs[2]) {
        (Ok(a), Ok(b), Ok(c)) => check("determinism", a == b && a == c, 0.0, "repeat and backend traces identical"),
        _ => check("determinism", false, f64::NAN, "run failed"),
    }
}

/// Quick property battery: exponential-family identities, exact recovery, I/O
/// round trip, metrics, determinism and the gradient battery at a reduced sample size.
pub fn selftest(seed: u64) -> Report {
    let mut report = Report {
        checks: vec![
            bregman_check(seed),
            exact_recovery_check(seed),
            libsvm_round_trip_check(seed),
            log_loss_check(),
            determinism_check(seed),
        ],
    };
    report.checks.extend(check_gradients(20_000, seed).checks);
    report
}
