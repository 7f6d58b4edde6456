use cvi::battery::{gaussian_battery, quadrature_fd_oracle};
use cvi::expfam::{gamma_shape_from_means, nat_to_mean, FamilyKind, MeanParams, NatParams};
use cvi::gradients::*;
use cvi::models::{Likelihood, NonConjugateFactor, Target};
use cvi::quadrature::gamma_expect;
use cvi::rng::{substream, Stream};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Estimator = fn(&dyn ScalarFunction, &NatParams, usize, &mut ChaCha8Rng) -> GradEstimate;

fn oa(f: &dyn ScalarFunction, q: &NatParams, s: usize, rng: &mut ChaCha8Rng) -> GradEstimate {
    gauss_grad_mean(f, q, s, rng).unwrap()
}

fn fs(f: &dyn ScalarFunction, q: &NatParams, s: usize, rng: &mut ChaCha8Rng) -> GradEstimate {
    fisher_solve_grad(f, q, s, rng).unwrap()
}

/// Gamma cases for the Fisher-solve route.
fn gamma_battery() -> Vec<(&'static str, Box<dyn ScalarFunction + Send>, NatParams)> {
    vec![
        (
            "gamma-shape",
            Box::new(NonConjugateFactor::new(Target::Scalar, Likelihood::GammaShape, 1.3).unwrap()),
            NatParams::gamma(3.0, 2.0).unwrap(),
        ),
        ("identity", Box::new(ScalarFn::new(|z| z, |_| 1.0)), NatParams::gamma(2.0, 3.0).unwrap()),
        ("sqrt", Box::new(ScalarFn::new(f64::sqrt, |z: f64| 0.5 / z.sqrt())), NatParams::gamma(4.0, 1.0).unwrap()),
        ("log1p", Box::new(ScalarFn::new(f64::ln_1p, |z| 1.0 / (1.0 + z))), NatParams::gamma(1.5, 0.5).unwrap()),
    ]
}

/// Central differences of the quadrature expectation in Gamma mean coordinates.
fn gamma_fd_oracle(f: &dyn ScalarFunction, q: &NatParams) -> Vec<f64> {
    let mu = nat_to_mean(q).unwrap();
    finite_diff_mean_grad(
        |p: &MeanParams| {
            let a = gamma_shape_from_means(p.values[0], p.values[1])?;
            let b = a / p.values[0];
            Ok(gamma_expect(a, b, |z| f.value(z)))
        },
        &mu,
        1e-5,
    )
    .unwrap()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn linear_and_quadratic_integrands_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = NatParams::gaussian(1.7, 0.4).unwrap();
    for s in [1, 2, 7, 100] {
        let g = gauss_grad_mean(&ScalarFn::new(|z| z, |_| 1.0).with_d2(|_| 0.0), &q, s, &mut rng).unwrap();
        assert_eq!(g.g, vec![1.0, 0.0]);
        let g = gauss_grad_mean(&ScalarFn::new(|z| z * z, |z| 2.0 * z).with_d2(|_| 2.0), &q, s, &mut rng).unwrap();
        assert!(g.g[0].abs() < 1e-12 && (g.g[1] - 1.0).abs() < 1e-15);
        assert_eq!(g.tag, EstimatorTag::OpperArchambeauMc);
        assert_eq!(g.n_samples % 2, 0);
    }
}

#[test]
fn second_derivative_fallback() {
    let f = ScalarFn::new(f64::sin, f64::cos);
    assert!(f.d2(0.3).is_none());
    assert!((second_derivative(&f, 0.3) + 0.3f64.sin()).abs() < 1e-9);
}

#[test]
fn conjugate_integrands_give_their_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = [
        (NatParams::gaussian(0.4, 2.0).unwrap(), 0.7, -0.3),
        (NatParams::gaussian(-3.0, 0.1).unwrap(), -1.0, 0.25),
        (NatParams::gamma(2.0, 3.0).unwrap(), 0.5, 1.5),
        (NatParams::gamma(0.7, 0.2).unwrap(), -2.0, 0.3),
    ];
    for (q, c1, c2) in cases {
        let f = ScalarFn::linear_in_stats(q.family, c1, c2);
        let mut estimates = vec![fisher_solve_grad(&f, &q, 3, &mut rng).unwrap(), fisher_solve_grad(&f, &q, 50, &mut rng).unwrap()];
        if q.family == FamilyKind::GaussianScalar {
            estimates.push(gauss_grad_mean(&f, &q, 1, &mut rng).unwrap());
            estimates.push(gauss_grad_mean(&f, &q, 10, &mut rng).unwrap());
            estimates.push(fisher_solve_grad(&f, &q, 2, &mut rng).unwrap());
            estimates.push(gauss_grad_exact(&f, &q).unwrap());
        } else {
            estimates.push(gamma_grad_exact(&f, &q).unwrap());
        }
        for g in estimates {
            assert!((g.g[0] - c1).abs() < 1e-10 && (g.g[1] - c2).abs() < 1e-10, "{q:?} {:?}", g);
        }
    }
}

#[test]
fn gamma_identity_integrand() {
    let q = NatParams::gamma(2.0, 3.0).unwrap();
    let f = ScalarFn::new(|z| z, |_| 1.0);
    let g = fisher_solve_grad(&f, &q, 100_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!((g.g[0] - 1.0).abs() < 1e-9 && g.g[1].abs() < 1e-9);
    let oracle = gamma_fd_oracle(&f, &q);
    assert!((oracle[0] - 1.0).abs() < 1e-6 && oracle[1].abs() < 1e-6);
    assert_eq!(g.tag, EstimatorTag::FisherSolveMc);
}

#[test]
fn finite_difference_examples() {
    let mu = MeanParams::gaussian(1.0, 1.0).unwrap();
    let g = finite_diff_mean_grad(|p: &MeanParams| Ok(p.values[0]), &mu, 1e-4).unwrap();
    assert!((g[0] - 1.0).abs() < 1e-12 && g[1].abs() < 1e-12);
    let mu = MeanParams::new(FamilyKind::GaussianScalar, vec![1.0, 2.0]).unwrap();
    let g = finite_diff_mean_grad(|p: &MeanParams| Ok(p.values[0].powi(2) + p.values[1].powi(2)), &mu, 1e-4).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
    // a step that leaves the domain is shrunk once: v = 1e-5 tolerates h = 1e-6 but not 1e-5
    let mu = MeanParams::gaussian(0.0, 5e-6).unwrap();
    let g = finite_diff_mean_grad(|p: &MeanParams| Ok(p.values[1]), &mu, 1e-5).unwrap();
    assert!((g[1] - 1.0).abs() < 1e-6);
    let mu = MeanParams::gaussian(0.0, 1e-8).unwrap();
    assert!(finite_diff_mean_grad(|p: &MeanParams| Ok(p.values[1]), &mu, 1e-5).is_err());
}

#[test]
fn logistic_gradient_matches_quadrature_oracle() {
    let f = NonConjugateFactor::new(Target::Scalar, Likelihood::BernoulliLogit, 1.0).unwrap();
    let q = NatParams::gaussian(0.0, 1.0).unwrap();
    let oracle = quadrature_fd_oracle(&f, &q).unwrap();
    let g = gauss_grad_mean(&f, &q, 1_000_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for k in 0..2 {
        assert!((g.g[k] - oracle[k]).abs() <= 3.0 * g.std_err[k] + 1e-9, "{k}: {} vs {}", g.g[k], oracle[k]);
    }
    let ex = gauss_grad_exact(&f, &q).unwrap();
    for k in 0..2 {
        assert!((ex.g[k] - oracle[k]).abs() < 1e-7);
    }
}

#[test]
fn mc_expectation_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = NatParams::gaussian(5.0, 1.0).unwrap();
    let v = mc_expectation(&ScalarFn::new(|z| z, |_| 1.0), &q, 1_000_000, &mut rng).unwrap();
    assert!((v - 5.0).abs() < 0.01);
    assert_eq!(mc_expectation(&ScalarFn::new(|_| 1.0, |_| 0.0), &q, 17, &mut rng).unwrap(), 1.0);
    let f = NonConjugateFactor::new(Target::Scalar, Likelihood::BernoulliLogit, 1.0).unwrap();
    let q = NatParams::gaussian(0.0, 1.0).unwrap();
    let (m, se) = mc_expectation_se(&f, &q, 100_000, &mut rng).unwrap();
    let exact = exact_expectation(&f, &q).unwrap();
    assert!((m - exact).abs() < 3.0 * se);
    let bad = ScalarFn::new(|z: f64| if z > 0.0 { f64::NAN } else { 0.0 }, |_| 0.0);
    assert!(matches!(mc_expectation(&bad, &q, 100, &mut rng), Err(cvi::CviError::Estimation { .. })));
}

#[test]
fn non_finite_derivative_reports_the_draw() {
    let f = ScalarFn::new(|z| z, |z| if z > 0.0 { f64::INFINITY } else { 1.0 });
    let q = NatParams::gaussian(0.0, 1.0).unwrap();
    match gauss_grad_mean(&f, &q, 10, &mut ChaCha8Rng::seed_from_u64(5)) {
        Err(cvi::CviError::Estimation { at, .. }) => assert!(at > 0.0),
        other => panic!("expected an estimation error, got {other:?}"),
    }
}

#[test]
fn unbiased_over_repeated_estimates() {
    let reps = 200;
    let s = 1000;
    for (ci, case) in gaussian_battery().iter().enumerate() {
        let oracle = quadrature_fd_oracle(case.f.as_ref(), &case.q).unwrap();
        for (ei, est) in [oa as Estimator, fs as Estimator].into_iter().enumerate() {
            let mut cols = [Vec::new(), Vec::new()];
            for r in 0..reps {
                let mut rng = substream(ci as u64, Stream::Test, ei as u64, r as u64);
                let g = est(case.f.as_ref(), &case.q, s, &mut rng);
                cols[0].push(g.g[0]);
                cols[1].push(g.g[1]);
            }
            for k in 0..2 {
                let (m, sd) = mean_sd(&cols[k]);
                let se = sd / (reps as f64).sqrt();
                assert!((m - oracle[k]).abs() <= 4.0 * se + 1e-9, "{} est {ei} coord {k}: {m} vs {} (se {se})", case.name, oracle[k]);
            }
        }
    }
    for (ci, (name, f, q)) in gamma_battery().iter().enumerate() {
        let oracle = gamma_fd_oracle(f.as_ref(), q);
        let mut cols = [Vec::new(), Vec::new()];
        for r in 0..reps {
            let mut rng = substream(100 + ci as u64, Stream::Test, 2, r as u64);
            let g = fisher_solve_grad(f.as_ref(), q, s, &mut rng).unwrap();
            cols[0].push(g.g[0]);
            cols[1].push(g.g[1]);
        }
        for k in 0..2 {
            let (m, sd) = mean_sd(&cols[k]);
            let se = sd / (reps as f64).sqrt();
            assert!((m - oracle[k]).abs() <= 4.0 * se + 1e-7, "{name} coord {k}: {m} vs {} (se {se})", oracle[k]);
        }
    }
}

#[test]
fn variance_decays_with_sample_count() {
    let reps = 2000;
    let var_at = |f: &dyn ScalarFunction, q: &NatParams, est: Estimator, s: usize, tag: u64| -> [f64; 2] {
        let mut cols = [Vec::new(), Vec::new()];
        for r in 0..reps {
            let mut rng = substream(tag, Stream::Test, s as u64, r as u64);
            let g = est(f, q, s, &mut rng);
            cols[0].push(g.g[0]);
            cols[1].push(g.g[1]);
        }
        [mean_sd(&cols[0]).1.powi(2), mean_sd(&cols[1]).1.powi(2)]
    };
    for (ci, case) in gaussian_battery().iter().enumerate() {
        for (ei, est) in [oa as Estimator, fs as Estimator].into_iter().enumerate() {
            let tag = 1000 + 10 * ci as u64 + ei as u64;
            let lo = var_at(case.f.as_ref(), &case.q, est, 1000, tag);
            let hi = var_at(case.f.as_ref(), &case.q, est, 4000, tag);
            for k in 0..2 {
                assert!(hi[k] <= 0.3 * lo[k] + 1e-28, "{} est {ei} coord {k}: {} vs {}", case.name, hi[k], lo[k]);
            }
        }
    }
    for (ci, (name, f, q)) in gamma_battery().iter().enumerate() {
        let gamma_fs: Estimator = fs;
        let lo = var_at(f.as_ref(), q, gamma_fs, 1000, 2000 + ci as u64);
        let hi = var_at(f.as_ref(), q, gamma_fs, 4000, 2000 + ci as u64);
        for k in 0..2 {
            assert!(hi[k] <= 0.3 * lo[k] + 1e-28, "{name} coord {k}: {} vs {}", hi[k], lo[k]);
        }
    }
}

#[test]
fn cross_estimator_agreement_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    use rand::Rng;
    for case in 0..20 {
        let m: f64 = rng.random_range(-2.0..2.0);
        let v: f64 = rng.random_range(0.1..3.0);
        let y = (case % 2) as f64;
        let f = NonConjugateFactor::new(Target::Scalar, Likelihood::BernoulliLogit, y).unwrap();
        let q = NatParams::gaussian(m, v).unwrap();
        // common random numbers
        let a = gauss_grad_mean(&f, &q, 2000, &mut substream(case, Stream::Test, 0, 0)).unwrap();
        let b = fisher_solve_grad(&f, &q, 2000, &mut substream(case, Stream::Test, 0, 0)).unwrap();
        for k in 0..2 {
            let se = (a.std_err[k].powi(2) + b.std_err[k].powi(2)).sqrt();
            assert!((a.g[k] - b.g[k]).abs() <= 3.0 * se + 1e-12);
        }
    }
}

#[test]
fn estimator_dispatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = ScalarFn::new(|z| z, |_| 1.0);
    let g = mean_grad(&f, &NatParams::gamma(2.0, 1.0).unwrap(), GradMode::MonteCarlo { samples: 1 }, &mut rng).unwrap();
    assert_eq!(g.tag, EstimatorTag::FisherSolveMc);
    let g = mean_grad(&f, &NatParams::gaussian(0.0, 1.0).unwrap(), GradMode::Exact, &mut rng).unwrap();
    assert_eq!(g.tag, EstimatorTag::Exact);
    assert!(fisher_solve_grad(&f, &NatParams::gaussian(0.0, 1.0).unwrap(), 1, &mut rng).is_err());
    assert!(gauss_grad_mean(&f, &NatParams::gaussian(0.0, 1.0).unwrap(), 0, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_gaussian_gradient_matches_oracle(m in -3.0..3.0f64, v in 0.05..4.0f64, y in 0u8..2) {
        let f = NonConjugateFactor::new(Target::Scalar, Likelihood::BernoulliLogit, y as f64).unwrap();
        let q = NatParams::gaussian(m, v).unwrap();
        let g = gauss_grad_exact(&f, &q).unwrap();
        let o = quadrature_fd_oracle(&f, &q).unwrap();
        for k in 0..2 {
            prop_assert!((g.g[k] - o[k]).abs() < 1e-6 * (1.0 + o[k].abs()));
        }
    }

    #[test]
    fn exact_gamma_gradient_matches_oracle(a in 0.5..20.0f64, b in 0.2..5.0f64, y in 0.1..5.0f64) {
        let f = NonConjugateFactor::new(Target::Scalar, Likelihood::GammaShape, y).unwrap();
        let q = NatParams::gamma(a, b).unwrap();
        let g = gamma_grad_exact(&f, &q).unwrap();
        let o = gamma_fd_oracle(&f, &q);
        for k in 0..2 {
            prop_assert!((g.g[k] - o[k]).abs() < 1e-5 * (1.0 + o[k].abs()), "{:?} vs {:?}", g.g, o);
        }
    }

    #[test]
    fn estimates_are_deterministic_per_stream(seed in any::<u64>()) {
        let f = NonConjugateFactor::new(Target::Scalar, Likelihood::BernoulliLogit, 1.0).unwrap();
        let q = NatParams::gamma(2.0, 1.0).unwrap();
        let a = fisher_solve_grad(&f, &NatParams::gaussian(0.2, 0.5).unwrap(), 9, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = fisher_solve_grad(&f, &NatParams::gaussian(0.2, 0.5).unwrap(), 9, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
        let g = ScalarFn::new(f64::sqrt, |z: f64| 0.5 / z.sqrt());
        let a = fisher_solve_grad(&g, &q, 9, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = fisher_solve_grad(&g, &q, 9, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.g, b.g);
    }
}
