//! Gradients of E_q[f] with respect to the mean parameters of q.
//!
//! Two stochastic routes are provided. For Gaussian q the derivative-based
//! route uses d/dm E f = E f' and d/dv E f = E f''/2, then the chain rule to
//! (mu1, mu2) = (m, v + m^2). For any family the Fisher-solve route estimates
//! the natural-parameter gradient and solves with the exact Fisher matrix.
//! Quadrature gives deterministic versions of both.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};

use crate::error::{CviError, Result};
use crate::expfam::{fisher_info, nat_to_mean, FamilyKind, MeanParams, NatParams};
use crate::quadrature::{gamma_nodes, gaussian_expect, gauss_hermite, GH_NODES};

/// Step of the central difference used when f'' is not supplied.
pub const D2_FALLBACK_STEP: f64 = 1e-5;

/// A scalar log-density term with pointwise derivatives.
pub trait ScalarFunction: Sync {
    fn value(&self, z: f64) -> f64;
    fn d1(&self, z: f64) -> f64;
    /// Second derivative, if available in closed form.
    fn d2(&self, _z: f64) -> Option<f64> {
        None
    }
    /// (f'(z), f''(z)) in one call; override when the two share work.
    fn d1_d2(&self, z: f64) -> (f64, f64) {
        (self.d1(z), second_derivative(self, z))
    }
    /// Closed-form `(E f, dE/dm, dE/dv)` under N(m, v), if known.
    fn gaussian_expectation(&self, _m: f64, _v: f64) -> Option<(f64, f64, f64)> {
        None
    }
}

/// f'' from the closed form or a central difference of f'.
pub fn second_derivative<F: ScalarFunction + ?Sized>(f: &F, z: f64) -> f64 {
    match f.d2(z) {
        Some(v) => v,
        None => (f.d1(z + D2_FALLBACK_STEP) - f.d1(z - D2_FALLBACK_STEP)) / (2.0 * D2_FALLBACK_STEP),
    }
}

type Eval = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// A [`ScalarFunction`] assembled from closures.
pub struct ScalarFn {
    f: Eval,
    f1: Eval,
    f2: Option<Eval>,
}

impl ScalarFn {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d1: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ScalarFn { f: Box::new(f), f1: Box::new(d1), f2: None }
    }

    pub fn with_d2(mut self, d2: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.f2 = Some(Box::new(d2));
        self
    }

    /// f(z) = c1 * phi1(z) + c2 * phi2(z) for the family's sufficient statistics.
    pub fn linear_in_stats(family: FamilyKind, c1: f64, c2: f64) -> Self {
        match family {
            FamilyKind::Gamma => ScalarFn::new(move |z| c1 * z + c2 * z.ln(), move |z| c1 + c2 / z)
                .with_d2(move |z| -c2 / (z * z)),
            _ => ScalarFn::new(move |z| c1 * z + c2 * z * z, move |z| c1 + 2.0 * c2 * z)
                .with_d2(move |_| 2.0 * c2),
        }
    }
}

impl ScalarFunction for ScalarFn {
    fn value(&self, z: f64) -> f64 {
        (self.f)(z)
    }
    fn d1(&self, z: f64) -> f64 {
        (self.f1)(z)
    }
    fn d2(&self, z: f64) -> Option<f64> {
        self.f2.as_ref().map(|g| g(z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorTag {
    Exact,
    OpperArchambeauMc,
    FisherSolveMc,
    FiniteDiff,
}

/// A gradient in mean-parameter coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub g: Vec<f64>,
    pub n_samples: usize,
    pub tag: EstimatorTag,
    /// Per-coordinate standard error; zero for deterministic estimates.
    pub std_err: Vec<f64>,
}

/// How site gradients are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    MonteCarlo { samples: usize },
    Exact,
}

fn finite(q: &'static str, z: f64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CviError::Estimation { quantity: q, at: z })
    }
}

fn mean_and_se(units: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let n = units.len() as f64;
    let mut mean = [0.0; 2];
    for u in units {
        mean[0] += u[0];
        mean[1] += u[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut se = [0.0; 2];
    if units.len() > 1 {
        for u in units {
            se[0] += (u[0] - mean[0]).powi(2);
            se[1] += (u[1] - mean[1]).powi(2);
        }
        se[0] = (se[0] / (n - 1.0) / n).sqrt();
        se[1] = (se[1] / (n - 1.0) / n).sqrt();
    }
    (mean, se)
}

/// Antithetic draws of (f'(z), f''(z)) averaged per pair, for z = m +/- sqrt(v) eps.
fn antithetic_derivs<F, R>(f: &F, m: f64, v: f64, samples: usize, rng: &mut R) -> Result<Vec<[f64; 2]>>
where
    F: ScalarFunction + ?Sized,
    R: Rng + ?Sized,
{
    let pairs = samples.div_ceil(2).max(1);
    let s = v.sqrt();
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let e: f64 = StandardNormal.sample(rng);
        let (zp, zm) = (m + s * e, m - s * e);
        let d1 = 0.5 * (finite("f'", zp, f.d1(zp))? + finite("f'", zm, f.d1(zm))?);
        let d2 = 0.5
            * (finite("f''", zp, second_derivative(f, zp))?
                + finite("f''", zm, second_derivative(f, zm))?);
        out.push([d1, d2]);
    }
    Ok(out)
}

/// Monte Carlo mean-parameter gradient for a scalar Gaussian q.
///
/// Draws come in antithetic pairs, so the sample count is rounded up to an
/// even number. Affine f' is then integrated exactly.
pub fn gauss_grad_mean<F, R>(f: &F, q: &NatParams, samples: usize, rng: &mut R) -> Result<GradEstimate>
where
    F: ScalarFunction + ?Sized,
    R: Rng + ?Sized,
{
    if samples == 0 {
        return Err(CviError::InvalidConfig("sample count must be at least 1".into()));
    }
    let (m, v) = q.gaussian_moments()?;
    let pairs = antithetic_derivs(f, m, v, samples, rng)?;
    let units: Vec<[f64; 2]> = pairs
        .iter()
        .map(|&[d1, d2]| [d1 - m * d2, 0.5 * d2])
        .collect();
    let (g, se) = mean_and_se(&units);
    Ok(GradEstimate {
        g: g.to_vec(),
        n_samples: 2 * pairs.len(),
        tag: EstimatorTag::OpperArchambeauMc,
        std_err: se.to_vec(),
    })
}

/// Gaussian mean-parameter gradient by Gauss-Hermite quadrature (or closed form when supplied).
pub fn gauss_grad_exact<F: ScalarFunction + ?Sized>(f: &F, q: &NatParams) -> Result<GradEstimate> {
    let (m, v) = q.gaussian_moments()?;
    let (dm, dv) = gauss_mv_derivs_exact(f, m, v)?;
    Ok(GradEstimate {
        g: vec![dm - 2.0 * m * dv, dv],
        n_samples: 0,
        tag: EstimatorTag::Exact,
        std_err: vec![0.0, 0.0],
    })
}

/// (dE/dm, dE/dv) of E f under N(m, v) by quadrature.
pub fn gauss_mv_derivs_exact<F: ScalarFunction + ?Sized>(f: &F, m: f64, v: f64) -> Result<(f64, f64)> {
    if let Some((_, dm, dv)) = f.gaussian_expectation(m, v) {
        return Ok((dm, dv));
    }
    let rule = gauss_hermite(GH_NODES);
    let s = v.sqrt();
    let (mut dm, mut d2) = (0.0, 0.0);
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let z = m + s * x;
        let (g1, g2) = f.d1_d2(z);
        dm += w * finite("f'", z, g1)?;
        d2 += w * finite("f''", z, g2)?;
    }
    Ok((dm, 0.5 * d2))
}

fn solve_fisher(c: &DMatrix<f64>, rhs: &[f64]) -> Result<Vec<f64>> {
    let ch = c
        .clone()
        .cholesky()
        .ok_or_else(|| CviError::out_of_domain("fisher information is singular; parameter too close to the boundary"))?;
    let x = ch.solve(&DVector::from_column_slice(rhs));
    if x.iter().all(|v| v.is_finite()) {
        Ok(x.iter().copied().collect())
    } else {
        Err(CviError::out_of_domain("fisher solve produced non-finite values"))
    }
}

/// Mean-parameter gradient via an estimate of dE/dlambda and a solve with the exact Fisher matrix.
///
/// Gaussian q: reparameterisation z = m + sqrt(v) eps with antithetic pairs.
/// Gamma q: score function with a cross-fitted regression control variate on
/// phi(z) = (z, log z). Each half of the draws is corrected with coefficients
/// fitted on the other half, which keeps the estimate unbiased and makes it
/// exact when h is linear in phi.
pub fn fisher_solve_grad<F, R>(h: &F, lambda: &NatParams, samples: usize, rng: &mut R) -> Result<GradEstimate>
where
    F: ScalarFunction + ?Sized,
    R: Rng + ?Sized,
{
    if samples < 2 {
        return Err(CviError::InvalidConfig("fisher-solve estimator needs at least 2 samples".into()));
    }
    let c = fisher_info(lambda)?;
    match lambda.family {
        FamilyKind::GaussianScalar => {
            let (m, v) = lambda.gaussian_moments()?;
            // d(m, v)/d(lambda1, lambda2)
            let jt = Matrix2::new(v, 0.0, 2.0 * m * v, 2.0 * v * v);
            let c2 = Matrix2::new(c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]);
            let chol = c2
                .cholesky()
                .ok_or_else(|| CviError::out_of_domain("fisher information is singular"))?;
            let pairs = antithetic_derivs(h, m, v, samples, rng)?;
            let units: Vec<[f64; 2]> = pairs
                .iter()
                .map(|&[d1, d2]| {
                    let dl = jt * Vector2::new(d1, 0.5 * d2);
                    let g = chol.solve(&dl);
                    [g[0], g[1]]
                })
                .collect();
            let (_, se) = mean_and_se(&units);
            let mut dl = Vector2::zeros();
            for &[d1, d2] in &pairs {
                dl += jt * Vector2::new(d1, 0.5 * d2);
            }
            dl /= pairs.len() as f64;
            let g = solve_fisher(&c, &[dl[0], dl[1]])?;
            Ok(GradEstimate {
                g,
                n_samples: 2 * pairs.len(),
                tag: EstimatorTag::FisherSolveMc,
                std_err: se.to_vec(),
            })
        }
        FamilyKind::Gamma => {
            let (a, b) = lambda.gamma_shape_rate()?;
            let mu = nat_to_mean(lambda)?.values;
            let dist = GammaDist::new(a, 1.0 / b)
                .map_err(|e| CviError::out_of_domain(format!("gamma sampler: {e}")))?;
            let mut phi = Vec::with_capacity(samples);
            let mut hv = Vec::with_capacity(samples);
            for _ in 0..samples {
                let z: f64 = dist.sample(rng);
                if !(z > 0.0) {
                    return Err(CviError::Estimation { quantity: "gamma draw", at: z });
                }
                let val = finite("h", z, h.value(z))?;
                phi.push([z - mu[0], z.ln() - mu[1]]);
                hv.push(val);
            }
            let dl = gamma_score_regression(&c, &phi, &hv);
            let g = solve_fisher(&c, &dl)?;
            let se = ols_sandwich_se(&phi, &hv).unwrap_or([f64::NAN, f64::NAN]);
            Ok(GradEstimate {
                g,
                n_samples: samples,
                tag: EstimatorTag::FisherSolveMc,
                std_err: se.to_vec(),
            })
        }
        FamilyKind::GaussianFull(_) => Err(CviError::FamilyMismatch {
            expected: "scalar family".into(),
            got: lambda.family.to_string(),
        }),
    }
}

/// OLS of h on [1, phi_c] over the given index set. Returns (intercept, slopes).
fn ols_fit(phi: &[[f64; 2]], h: &[f64], idx: impl Iterator<Item = usize> + Clone) -> Option<(f64, [f64; 2])> {
    let mut xtx = nalgebra::Matrix3::<f64>::zeros();
    let mut xty = nalgebra::Vector3::<f64>::zeros();
    let mut n = 0;
    for i in idx {
        let x = nalgebra::Vector3::new(1.0, phi[i][0], phi[i][1]);
        xtx += x * x.transpose();
        xty += x * h[i];
        n += 1;
    }
    if n < 3 {
        return None;
    }
    let sol = xtx.cholesky()?.solve(&xty);
    sol.iter().all(|v| v.is_finite()).then(|| (sol[0], [sol[1], sol[2]]))
}

/// Estimate of dE[h]/dlambda = E[h (phi - mu)] with phi already centred at the exact mean.
///
/// With at least six draws each half is corrected by the regression fitted on
/// the other half: C c + mean[(h - b0 - c . phi)(phi)], where C is the exact
/// covariance of phi. Three to five draws use one in-sample fit (exact for
/// linear h, biased by O(1/S) otherwise). Two draws fall back to a
/// leave-one-out mean of h.
fn gamma_score_regression(c_mat: &DMatrix<f64>, phi: &[[f64; 2]], h: &[f64]) -> [f64; 2] {
    let s = phi.len();
    let half = s / 2;
    let fits = if s >= 6 {
        ols_fit(phi, h, half..s).zip(ols_fit(phi, h, 0..half))
    } else {
        None
    };
    if fits.is_none() && s >= 3 {
        if let Some((_, c)) = ols_fit(phi, h, 0..s) {
            return [
                c_mat[(0, 0)] * c[0] + c_mat[(0, 1)] * c[1],
                c_mat[(1, 0)] * c[0] + c_mat[(1, 1)] * c[1],
            ];
        }
    }
    match fits {
        Some((fit_second, fit_first)) => {
            let mut acc = [0.0; 2];
            for (range, (b0, c)) in [(0..half, fit_second), (half..s, fit_first)] {
                let n = range.len() as f64;
                let mut part = [
                    c_mat[(0, 0)] * c[0] + c_mat[(0, 1)] * c[1],
                    c_mat[(1, 0)] * c[0] + c_mat[(1, 1)] * c[1],
                ];
                for i in range {
                    let r = h[i] - b0 - c[0] * phi[i][0] - c[1] * phi[i][1];
                    part[0] += r * phi[i][0] / n;
                    part[1] += r * phi[i][1] / n;
                }
                let w = n / s as f64;
                acc[0] += w * part[0];
                acc[1] += w * part[1];
            }
            acc
        }
        None => {
            let total: f64 = h.iter().sum();
            let n = s as f64;
            let mut acc = [0.0; 2];
            for i in 0..s {
                let base = (total - h[i]) / (n - 1.0);
                acc[0] += (h[i] - base) * phi[i][0];
                acc[1] += (h[i] - base) * phi[i][1];
            }
            [acc[0] / n, acc[1] / n]
        }
    }
}

/// Heteroskedasticity-robust standard errors of the OLS slopes of h on phi_c.
fn ols_sandwich_se(phi: &[[f64; 2]], h: &[f64]) -> Option<[f64; 2]> {
    let n = phi.len();
    let (b0, c) = ols_fit(phi, h, 0..n)?;
    let mut xtx = nalgebra::Matrix3::<f64>::zeros();
    let mut meat = nalgebra::Matrix3::<f64>::zeros();
    for i in 0..n {
        let x = nalgebra::Vector3::new(1.0, phi[i][0], phi[i][1]);
        let r = h[i] - b0 - c[0] * phi[i][0] - c[1] * phi[i][1];
        xtx += x * x.transpose();
        meat += x * x.transpose() * (r * r);
    }
    let inv = xtx.try_inverse()?;
    let cov = inv * meat * inv;
    Some([cov[(1, 1)].max(0.0).sqrt(), cov[(2, 2)].max(0.0).sqrt()])
}

/// Gamma mean-parameter gradient by quadrature: solve C g = Cov(h, phi).
pub fn gamma_grad_exact<F: ScalarFunction + ?Sized>(h: &F, lambda: &NatParams) -> Result<GradEstimate> {
    let (a, b) = lambda.gamma_shape_rate()?;
    let mu = nat_to_mean(lambda)?.values;
    let mut dl = [0.0; 2];
    for (z, lz, w) in gamma_nodes(a, b) {
        let val = h.value(z);
        if !val.is_finite() {
            if w == 0.0 {
                continue;
            }
            return Err(CviError::Estimation { quantity: "h", at: z });
        }
        dl[0] += w * val * (z - mu[0]);
        dl[1] += w * val * (lz - mu[1]);
    }
    let g = solve_fisher(&fisher_info(lambda)?, &dl)?;
    Ok(GradEstimate { g, n_samples: 0, tag: EstimatorTag::Exact, std_err: vec![0.0, 0.0] })
}

/// Mean-parameter gradient for a scalar family, by the configured route.
pub fn mean_grad<F, R>(f: &F, q: &NatParams, mode: GradMode, rng: &mut R) -> Result<GradEstimate>
where
    F: ScalarFunction + ?Sized,
    R: Rng + ?Sized,
{
    match (q.family, mode) {
        (FamilyKind::GaussianScalar, GradMode::MonteCarlo { samples }) => gauss_grad_mean(f, q, samples, rng),
        (FamilyKind::GaussianScalar, GradMode::Exact) => gauss_grad_exact(f, q),
        (FamilyKind::Gamma, GradMode::MonteCarlo { samples }) => fisher_solve_grad(f, q, samples.max(2), rng),
        (FamilyKind::Gamma, GradMode::Exact) => gamma_grad_exact(f, q),
        (FamilyKind::GaussianFull(_), _) => Err(CviError::FamilyMismatch {
            expected: "scalar family".into(),
            got: q.family.to_string(),
        }),
    }
}

/// Central finite differences of an expectation functional in mean coordinates.
///
/// If a perturbed point leaves the mean domain the step is shrunk tenfold once.
pub fn finite_diff_mean_grad<E>(e: E, mu: &MeanParams, h: f64) -> Result<Vec<f64>>
where
    E: Fn(&MeanParams) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(CviError::InvalidConfig("finite-difference step must be positive".into()));
    }
    mu.validate()?;
    let mut out = Vec::with_capacity(mu.values.len());
    for k in 0..mu.values.len() {
        let attempt = |step: f64| -> Result<f64> {
            let mut p = mu.clone();
            let mut m = mu.clone();
            p.values[k] += step;
            m.values[k] -= step;
            p.validate()?;
            m.validate()?;
            Ok((e(&p)? - e(&m)?) / (2.0 * step))
        };
        let d = match attempt(h) {
            Ok(d) => d,
            Err(err) if err.is_out_of_domain() => attempt(h / 10.0)?,
            Err(err) => return Err(err),
        };
        out.push(d);
    }
    Ok(out)
}

/// E_q[f] by quadrature for scalar families.
pub fn exact_expectation<F: ScalarFunction + ?Sized>(f: &F, q: &NatParams) -> Result<f64> {
    match q.family {
        FamilyKind::GaussianScalar => {
            let (m, v) = q.gaussian_moments()?;
            if let Some((e, _, _)) = f.gaussian_expectation(m, v) {
                return Ok(e);
            }
            Ok(gaussian_expect(m, v, GH_NODES, |z| f.value(z)))
        }
        FamilyKind::Gamma => {
            let (a, b) = q.gamma_shape_rate()?;
            Ok(gamma_nodes(a, b)
                .into_iter()
                .filter(|&(_, _, w)| w > 0.0)
                .map(|(z, _, w)| w * f.value(z))
                .sum())
        }
        FamilyKind::GaussianFull(_) => Err(CviError::FamilyMismatch {
            expected: "scalar family".into(),
            got: q.family.to_string(),
        }),
    }
}

/// Monte Carlo mean of f over draws from a scalar q, with its standard error.
pub fn mc_expectation_se<F, R>(f: &F, q: &NatParams, samples: usize, rng: &mut R) -> Result<(f64, f64)>
where
    F: ScalarFunction + ?Sized,
    R: Rng + ?Sized,
{
    if samples == 0 {
        return Err(CviError::InvalidConfig("sample count must be at least 1".into()));
    }
    let draws = crate::expfam::sample(q, samples, rng)?;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for &z in draws.iter() {
        let v = finite("f", z, f.value(z))?;
        sum += v;
        sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = if samples > 1 { ((sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok((mean, (var / n).sqrt()))
}

/// Monte Carlo mean of f over draws from a scalar q.
pub fn mc_expectation<F, R>(f: &F, q: &NatParams, samples: usize, rng: &mut R) -> Result<f64>
where
    F: ScalarFunction + ?Sized,
    R: Rng + ?Sized,
{
    mc_expectation_se(f, q, samples, rng).map(|(m, _)| m)
}
