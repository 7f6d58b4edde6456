//! A fixed set of (integrand, Gaussian q) cases used to check gradient estimators.

use crate::error::Result;
use crate::expfam::{MeanParams, NatParams};
use crate::gradients::{finite_diff_mean_grad, ScalarFn, ScalarFunction};
use crate::models::{Likelihood, NonConjugateFactor, Target};
use crate::quadrature::{gaussian_expect, GH_NODES};

/// Step of the finite-difference oracle in mean coordinates.
pub const ORACLE_STEP: f64 = 1e-4;

pub struct BatteryCase {
    pub name: &'static str,
    pub f: Box<dyn ScalarFunction + Send>,
    pub q: NatParams,
}

fn factor(likelihood: Likelihood, y: f64) -> Box<dyn ScalarFunction + Send> {
    Box::new(NonConjugateFactor::new(Target::Scalar, likelihood, y).expect("valid battery label"))
}

/// The ten cases. Gaussian-likelihood terms drop their closed form so that every
/// estimator runs its sampling path.
pub fn gaussian_battery() -> Vec<BatteryCase> {
    let q = |m: f64, v: f64| NatParams::gaussian(m, v).expect("valid battery q");
    vec![
        BatteryCase { name: "logit-y1", f: factor(Likelihood::BernoulliLogit, 1.0), q: q(0.0, 1.0) },
        BatteryCase { name: "logit-y0", f: factor(Likelihood::BernoulliLogit, 0.0), q: q(1.5, 0.5) },
        BatteryCase { name: "logit-wide", f: factor(Likelihood::BernoulliLogit, 1.0), q: q(-2.0, 4.0) },
        BatteryCase { name: "probit-y1", f: factor(Likelihood::BernoulliProbit, 1.0), q: q(-0.5, 2.0) },
        BatteryCase { name: "probit-y0", f: factor(Likelihood::BernoulliProbit, 0.0), q: q(0.8, 0.3) },
        BatteryCase {
            name: "gauss-lik",
            f: Box::new(ScalarFn::new(|z| -0.5 * (z - 0.7f64).powi(2) / 0.5, |z| -(z - 0.7) / 0.5).with_d2(|_| -2.0)),
            q: q(0.0, 1.0),
        },
        BatteryCase {
            name: "sin",
            f: Box::new(ScalarFn::new(f64::sin, f64::cos).with_d2(|z| -z.sin())),
            q: q(0.3, 1.2),
        },
        BatteryCase {
            name: "cubic",
            f: Box::new(ScalarFn::new(|z| z * z * z, |z| 3.0 * z * z).with_d2(|z| 6.0 * z)),
            q: q(0.5, 0.7),
        },
        BatteryCase {
            name: "log-cosh",
            f: Box::new(ScalarFn::new(|z: f64| z.cosh().ln(), f64::tanh)),
            q: q(-1.0, 0.8),
        },
        BatteryCase {
            name: "exp-half",
            f: Box::new(ScalarFn::new(|z: f64| (0.5 * z).exp(), |z: f64| 0.5 * (0.5 * z).exp()).with_d2(|z: f64| 0.25 * (0.5 * z).exp())),
            q: q(0.2, 0.6),
        },
    ]
}

/// Central differences of the quadrature expectation in (mu1, mu2).
pub fn quadrature_fd_oracle<F: ScalarFunction + ?Sized>(f: &F, q: &NatParams) -> Result<Vec<f64>> {
    let (m, v) = q.gaussian_moments()?;
    let mu = MeanParams::gaussian(m, v)?;
    finite_diff_mean_grad(
        |p: &MeanParams| {
            let (m, s) = (p.values[0], p.values[1]);
            Ok(gaussian_expect(m, s - m * m, GH_NODES, |z| f.value(z)))
        },
        &mu,
        ORACLE_STEP,
    )
}
