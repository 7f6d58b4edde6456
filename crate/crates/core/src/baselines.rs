//! Gradient-ascent baselines on a plain parameterisation of q.
//!
//! Gaussian q is N(m, L L^T) with a lower-triangular L whose diagonal passes
//! through a softplus; Gamma q has shape and rate behind softplus maps. The
//! ELBO is the expected log-likelihood minus the closed-form KL to the prior.
//! None of this uses sites or the conjugate backends.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Gamma as GammaDist, StandardNormal};

use crate::conjugate::ConjugateModelSpec;
use crate::error::{CviError, Result};
use crate::expfam::NatParams;
use crate::gradients::{exact_expectation, gauss_mv_derivs_exact, GradMode, ScalarFunction};
use crate::linalg::{cholesky_jitter, pack_lower, packed_index, packed_len};
use crate::models::{CviModel, NonConjugateFactor};
use crate::rng::{substream, Stream};
use crate::special::{digamma, ln_gamma, sigmoid, softplus, softplus_inv, trigamma};
use crate::trace::{Clock, RunTrace, TraceRow};

#[derive(Debug, Clone)]
enum Prior {
    /// N(0, delta I)
    Isotropic { delta: f64, dim: usize },
    /// N(0, K) with K^-1 and log |K|
    Dense { prec: DMatrix<f64>, ln_det: f64 },
    Gamma { a: f64, b: f64 },
}

/// What a baseline needs from a model: the prior and each factor's linear read-out.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    prior: Prior,
    /// row n maps z to the quantity factor n reads
    readout: DMatrix<f64>,
    factors: Vec<NonConjugateFactor>,
}

impl BaselineModel {
    pub fn from_model(model: &CviModel) -> Result<Self> {
        let n = model.factors.len();
        let pos: Vec<usize> = model.factors.iter().map(|f| f.target.position()).collect();
        let (prior, readout) = match &model.spec {
            ConjugateModelSpec::LinReg(s) => {
                let x = s.design();
                let readout = DMatrix::from_fn(n, s.dim(), |r, c| x[(pos[r], c)]);
                (Prior::Isotropic { delta: s.delta(), dim: s.dim() }, readout)
            }
            ConjugateModelSpec::Gp(s) => dense_prior(s.kernel().clone(), &pos)?,
            ConjugateModelSpec::Kalman(s) => dense_prior(s.chain_covariance(), &pos)?,
            ConjugateModelSpec::GammaPrior(s) => (Prior::Gamma { a: s.a, b: s.b }, DMatrix::zeros(n, 0)),
        };
        Ok(BaselineModel { prior, readout, factors: model.factors.clone() })
    }

    /// Latent dimension for Gaussian models, 0 for Gamma.
    pub fn dim(&self) -> usize {
        match &self.prior {
            Prior::Isotropic { dim, .. } => *dim,
            Prior::Dense { prec, .. } => prec.nrows(),
            Prior::Gamma { .. } => 0,
        }
    }

    pub fn is_gamma(&self) -> bool {
        matches!(self.prior, Prior::Gamma { .. })
    }

    /// q equal to the prior.
    pub fn prior_params(&self) -> Result<FlatParams> {
        match &self.prior {
            Prior::Isotropic { delta, dim } => FlatParams::gaussian(&DVector::zeros(*dim), &(DMatrix::identity(*dim, *dim) * delta.sqrt())),
            Prior::Dense { prec, .. } => {
                let cov = prec.clone().try_inverse().ok_or_else(|| CviError::InvalidModel("prior covariance is singular".into()))?;
                let l = cholesky_jitter(cov, "prior covariance")?.l();
                FlatParams::gaussian(&DVector::zeros(prec.nrows()), &l)
            }
            Prior::Gamma { a, b } => FlatParams::gamma(*a, *b),
        }
    }
}

fn dense_prior(k: DMatrix<f64>, pos: &[usize]) -> Result<(Prior, DMatrix<f64>)> {
    let d = k.nrows();
    let chol = cholesky_jitter(k, "prior covariance")?;
    let ln_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let prec = chol.inverse();
    let readout = DMatrix::from_fn(pos.len(), d, |r, c| if pos[r] == c { 1.0 } else { 0.0 });
    Ok((Prior::Dense { prec, ln_det }, readout))
}

/// Unconstrained variational parameters.
///
/// Gaussian layout: `[m (d), packed lower triangle of L]`, diagonal entries of L
/// stored as softplus preimages. Gamma layout: `[shape', rate']`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    /// d for Gaussian, None for Gamma
    pub dim: Option<usize>,
}

impl FlatParams {
    pub fn gaussian(m: &DVector<f64>, l: &DMatrix<f64>) -> Result<Self> {
        let d = m.len();
        if l.shape() != (d, d) {
            return Err(CviError::DimensionMismatch { expected: d, got: l.nrows() });
        }
        let mut values: Vec<f64> = m.iter().copied().collect();
        let mut packed = pack_lower(l);
        for i in 0..d {
            let k = packed_index(i, i);
            if !(packed[k] > 0.0) {
                return Err(CviError::out_of_domain("cholesky diagonal must be positive"));
            }
            packed[k] = softplus_inv(packed[k]);
        }
        values.extend(packed);
        Ok(FlatParams { values, dim: Some(d) })
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) {
            return Err(CviError::out_of_domain("gamma shape and rate must be positive"));
        }
        Ok(FlatParams { values: vec![softplus_inv(shape), softplus_inv(rate)], dim: None })
    }

    /// (m, L) of a Gaussian q.
    pub fn gaussian_factors(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.dim.ok_or_else(|| CviError::FamilyMismatch { expected: "gaussian".into(), got: "gamma".into() })?;
        if self.values.len() != d + packed_len(d) {
            return Err(CviError::DimensionMismatch { expected: d + packed_len(d), got: self.values.len() });
        }
        let m = DVector::from_column_slice(&self.values[..d]);
        let p = &self.values[d..];
        let l = DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => softplus(p[packed_index(i, i)]),
            std::cmp::Ordering::Greater => p[packed_index(i, j)],
        });
        Ok((m, l))
    }

    /// (mean, covariance) of a Gaussian q.
    pub fn gaussian_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (m, l) = self.gaussian_factors()?;
        let v = &l * l.transpose();
        Ok((m, v))
    }

    /// (shape, rate) of a Gamma q.
    pub fn gamma_shape_rate(&self) -> Result<(f64, f64)> {
        match (self.dim, self.values.as_slice()) {
            (None, [a, b]) => Ok((softplus(*a), softplus(*b))),
            _ => Err(CviError::FamilyMismatch { expected: "gamma".into(), got: "gaussian".into() }),
        }
    }
}

/// ELBO value and its gradient in [`FlatParams`] coordinates.
#[derive(Debug, Clone)]
pub struct ElboGrad {
    pub elbo: f64,
    pub grad: Vec<f64>,
}

/// Estimate of the ELBO and its gradient.
///
/// Gaussian q: reparameterisation z = m + L eps with `samples` draws, or per-factor
/// quadrature in exact mode. Gamma q: score function with a leave-one-out baseline,
/// or quadrature in exact mode. The KL (Gaussian) and prior/entropy (Gamma) parts are
/// always in closed form.
pub fn elbo_and_grad<R: Rng + ?Sized>(model: &BaselineModel, params: &FlatParams, mode: GradMode, rng: &mut R) -> Result<ElboGrad> {
    match &model.prior {
        Prior::Gamma { a, b } => gamma_elbo_and_grad(model, *a, *b, params, mode, rng),
        _ => gaussian_elbo_and_grad(model, params, mode, rng),
    }
}

fn gaussian_elbo_and_grad<R: Rng + ?Sized>(model: &BaselineModel, params: &FlatParams, mode: GradMode, rng: &mut R) -> Result<ElboGrad> {
    let d = model.dim();
    if params.dim != Some(d) {
        return Err(CviError::DimensionMismatch { expected: d, got: params.dim.unwrap_or(0) });
    }
    let (m, l) = params.gaussian_factors()?;
    let a = &model.readout;
    let mut lik = 0.0;
    let mut gm = DVector::zeros(d);
    let mut gl = DMatrix::zeros(d, d);
    match mode {
        GradMode::Exact => {
            let mu = a * &m;
            let u = a * &l;
            let mut w = DVector::zeros(model.factors.len());
            for (n, f) in model.factors.iter().enumerate() {
                let s2 = u.row(n).norm_squared();
                let q = NatParams::gaussian(mu[n], s2)?;
                lik += exact_expectation(f, &q)?;
                let (dm, dv) = gauss_mv_derivs_exact(f, mu[n], s2)?;
                gm += a.row(n).transpose() * dm;
                w[n] = 2.0 * dv;
            }
            // d/dL sum_n E f_n = sum_n 2 dv_n a_n a_n^T L
            gl = a.transpose() * DMatrix::from_diagonal(&w) * &u;
        }
        GradMode::MonteCarlo { samples } => {
            if samples == 0 {
                return Err(CviError::InvalidConfig("mc_samples must be at least 1".into()));
            }
            for _ in 0..samples {
                let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let z = &m + &l * &eps;
                let eta = a * z;
                let mut d1 = DVector::zeros(eta.len());
                for (n, f) in model.factors.iter().enumerate() {
                    let (v, g) = (f.value(eta[n]), f.d1(eta[n]));
                    if !v.is_finite() || !g.is_finite() {
                        return Err(CviError::Estimation { quantity: "log-likelihood", at: eta[n] });
                    }
                    lik += v;
                    d1[n] = g;
                }
                let gz = a.transpose() * d1;
                gl += &gz * eps.transpose();
                gm += gz;
            }
            let s = samples as f64;
            lik /= s;
            gm /= s;
            gl /= s;
        }
    }
    // closed-form KL(N(m, L L^T) || prior) and its gradient
    let ln_det_l: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    let (kl, kl_m, kl_l) = match &model.prior {
        Prior::Isotropic { delta, .. } => (
            0.5 * ((l.norm_squared() + m.norm_squared()) / delta - d as f64 + d as f64 * delta.ln() - 2.0 * ln_det_l),
            &m / *delta,
            &l / *delta,
        ),
        Prior::Dense { prec, ln_det } => {
            let pl = prec * &l;
            let pm = prec * &m;
            let tr = l.component_mul(&pl).sum();
            (0.5 * (tr + m.dot(&pm) - d as f64 + ln_det - 2.0 * ln_det_l), pm, pl)
        }
        Prior::Gamma { .. } => unreachable!("gaussian path"),
    };
    let gm = gm - kl_m;
    let mut grad: Vec<f64> = gm.iter().copied().collect();
    let raw = &params.values[d..];
    for i in 0..d {
        for j in 0..=i {
            let mut g = gl[(i, j)] - kl_l[(i, j)];
            if i == j {
                g += 1.0 / l[(i, i)];
                g *= sigmoid(raw[packed_index(i, i)]);
            }
            grad.push(g);
        }
    }
    Ok(ElboGrad { elbo: lik - kl, grad })
}

fn gamma_elbo_and_grad<R: Rng + ?Sized>(model: &BaselineModel, a: f64, b: f64, params: &FlatParams, mode: GradMode, rng: &mut R) -> Result<ElboGrad> {
    let (alpha, beta) = params.gamma_shape_rate()?;
    let q = NatParams::gamma(alpha, beta)?;
    // E log Ga(z | a, b) + H(q) and its (alpha, beta) gradient
    let e_ln = digamma(alpha) - beta.ln();
    let closed = a * b.ln() - ln_gamma(a) + (a - 1.0) * e_ln - b * alpha / beta + alpha - beta.ln() + ln_gamma(alpha) + (1.0 - alpha) * digamma(alpha);
    let mut g_alpha = (a - alpha) * trigamma(alpha) - b / beta + 1.0;
    let mut g_beta = (b * alpha / beta - a) / beta;
    let mut lik = 0.0;
    match mode {
        GradMode::Exact => {
            let h = |z: f64| model.factors.iter().map(|f| f.value(z)).sum::<f64>();
            for f in &model.factors {
                lik += exact_expectation(f, &q)?;
            }
            // score identity in (alpha, beta): Cov(ln z, h) and Cov(-z, h)
            let nodes = crate::quadrature::gamma_nodes(alpha, beta);
            let (mut eh, mut el, mut ezh, mut elh) = (0.0, 0.0, 0.0, 0.0);
            for &(z, lz, w) in &nodes {
                let hz = h(z);
                eh += w * hz;
                el += w * lz;
                ezh += w * z * hz;
                elh += w * lz * hz;
            }
            g_alpha += elh - el * eh;
            g_beta += alpha / beta * eh - ezh;
        }
        GradMode::MonteCarlo { samples } => {
            let s = samples.max(2);
            let dist = GammaDist::new(alpha, 1.0 / beta).map_err(|e| CviError::out_of_domain(e.to_string()))?;
            let mut draws = Vec::with_capacity(s);
            for _ in 0..s {
                let z: f64 = rng.sample(dist);
                let z = z.max(f64::MIN_POSITIVE);
                let mut hz = 0.0;
                for f in &model.factors {
                    let v = f.value(z);
                    if !v.is_finite() {
                        return Err(CviError::Estimation { quantity: "log-likelihood", at: z });
                    }
                    hz += v;
                }
                draws.push((z, hz));
            }
            let total: f64 = draws.iter().map(|d| d.1).sum();
            lik = total / s as f64;
            let (mut ga, mut gb) = (0.0, 0.0);
            for &(z, hz) in &draws {
                let base = (total - hz) / (s - 1) as f64;
                let c = hz - base;
                ga += c * (beta.ln() + z.ln() - digamma(alpha));
                gb += c * (alpha / beta - z);
            }
            g_alpha += ga / s as f64;
            g_beta += gb / s as f64;
        }
    }
    let grad = vec![g_alpha * sigmoid(params.values[0]), g_beta * sigmoid(params.values[1])];
    Ok(ElboGrad { elbo: lik + closed, grad })
}

/// params + rho g.
pub fn sgd_step(params: &FlatParams, g: &[f64], rho: f64) -> Result<FlatParams> {
    if g.len() != params.values.len() {
        return Err(CviError::DimensionMismatch { expected: params.values.len(), got: g.len() });
    }
    let values = params.values.iter().zip(g).map(|(p, gi)| p + rho * gi).collect();
    Ok(FlatParams { values, dim: params.dim })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub w0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(w0: f64) -> Self {
        AdamHyper { w0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected ADAM ascent step.
pub fn adam_step(params: &FlatParams, g: &[f64], state: &AdamState, h: &AdamHyper) -> Result<(FlatParams, AdamState)> {
    let n = params.values.len();
    if g.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(CviError::DimensionMismatch { expected: n, got: g.len() });
    }
    let t = state.t + 1;
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    let mut next = AdamState { m: Vec::with_capacity(n), v: Vec::with_capacity(n), t };
    let mut values = Vec::with_capacity(n);
    for k in 0..n {
        let m = h.beta1 * state.m[k] + (1.0 - h.beta1) * g[k];
        let v = h.beta2 * state.v[k] + (1.0 - h.beta2) * g[k] * g[k];
        values.push(params.values[k] + h.w0 * (m / c1) / ((v / c2).sqrt() + h.eps));
        next.m.push(m);
        next.v.push(v);
    }
    Ok((FlatParams { values, dim: params.dim }, next))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { rho: f64 },
    Adam(AdamHyper),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub optimizer: Optimizer,
    pub grad_mode: GradMode,
    pub max_iters: usize,
    pub seed: u64,
    pub record_time: bool,
    /// Evaluate the exact negative ELBO each iteration.
    pub track_elbo: bool,
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub params: FlatParams,
    pub trace: RunTrace,
}

/// Evaluation callback on the current parameters: (train log-loss, test log-loss).
pub type BaselineHook<'a> = dyn FnMut(usize, &FlatParams) -> Result<(f64, f64)> + 'a;

/// Exact negative ELBO (quadrature for the likelihood terms).
pub fn neg_elbo(model: &BaselineModel, params: &FlatParams) -> Result<f64> {
    let mut rng = substream(0, Stream::Baseline, 0, 0);
    Ok(-elbo_and_grad(model, params, GradMode::Exact, &mut rng)?.elbo)
}

/// Runs SGD or ADAM from the prior.
pub fn run_baseline(model: &BaselineModel, cfg: &BaselineConfig, mut hook: Option<&mut BaselineHook<'_>>) -> Result<BaselineRun> {
    if cfg.max_iters == 0 {
        return Err(CviError::InvalidConfig("max_iters must be at least 1".into()));
    }
    match cfg.optimizer {
        Optimizer::Sgd { rho } if !(rho > 0.0) => return Err(CviError::InvalidConfig("step size must be positive".into())),
        Optimizer::Adam(h) if !(h.w0 > 0.0) => return Err(CviError::InvalidConfig("ADAM step size must be positive".into())),
        _ => {}
    }
    let clock = Clock::start(cfg.record_time);
    let mut params = model.prior_params()?;
    let mut adam = AdamState::new(params.values.len());
    let mut trace = RunTrace::default();
    for t in 1..=cfg.max_iters {
        let mut rng = substream(cfg.seed, Stream::Baseline, t as u64, 0);
        let eg = elbo_and_grad(model, &params, cfg.grad_mode, &mut rng).map_err(|e| e.at_iteration(t))?;
        params = match cfg.optimizer {
            Optimizer::Sgd { rho } => sgd_step(&params, &eg.grad, rho)?,
            Optimizer::Adam(h) => {
                let (p, s) = adam_step(&params, &eg.grad, &adam, &h)?;
                adam = s;
                p
            }
        };
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(CviError::out_of_domain("optimizer produced non-finite parameters").at_iteration(t));
        }
        let neg = if cfg.track_elbo { neg_elbo(model, &params).map_err(|e| e.at_iteration(t))? } else { f64::NAN };
        let (train, test) = match hook.as_mut() {
            Some(h) => h(t, &params).map_err(|e| e.at_iteration(t))?,
            None => (f64::NAN, f64::NAN),
        };
        trace.push(TraceRow {
            iter: t,
            elapsed_ms: clock.elapsed_ms(),
            neg_elbo: neg,
            train_logloss: train,
            test_logloss: test,
            guard_halvings: 0,
            beta_eff: f64::NAN,
            guard_exhausted: false,
        });
    }
    Ok(BaselineRun { params, trace })
}
