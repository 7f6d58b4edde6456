//! Exact posterior computations for the conjugate backends.
//!
//! Every backend consumes per-target Gaussian (or Gamma) sites: natural
//! parameter increments `[l1, l2]` attached to a scalar latent quantity.
//! A Gaussian site contributes `exp(l1 * z + l2 * z^2)`, a Gamma site
//! `exp(l1 * z + l2 * log z)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{CviError, Result};
use crate::expfam::{FamilyKind, NatParams};
use crate::linalg::{chol_logdet, chol_trace_inverse, cholesky_jitter, Chol};
use crate::par::{map_range, Parallelism};

/// Natural-parameter increment attached to one scalar target.
pub type Site = [f64; 2];

/// Bayesian linear regression prior N(0, delta I) over weights, with design rows x~_n.
#[derive(Debug, Clone)]
pub struct LinRegSpec {
    design: DMatrix<f64>,
    delta: f64,
}

impl LinRegSpec {
    /// `design` already carries the bias column.
    pub fn new(design: DMatrix<f64>, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(CviError::InvalidModel(format!("prior scale must be positive, got {delta}")));
        }
        if design.ncols() == 0 {
            return Err(CviError::InvalidModel("design needs at least the bias column".into()));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(CviError::InvalidModel("design contains non-finite entries".into()));
        }
        Ok(LinRegSpec { design, delta })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    /// True when the matrix-inversion-lemma path is used.
    pub fn uses_dual(&self) -> bool {
        self.n_rows() < self.dim()
    }
}

/// Zero-mean Gaussian prior N(0, K) on one latent value per index.
#[derive(Debug, Clone)]
pub struct GpSpec {
    kernel: DMatrix<f64>,
    chol: Chol,
}

impl GpSpec {
    pub fn new(kernel: DMatrix<f64>) -> Result<Self> {
        let n = kernel.nrows();
        if kernel.ncols() != n {
            return Err(CviError::InvalidModel("kernel matrix must be square".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (kernel[(i, j)], kernel[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(CviError::InvalidModel("kernel matrix must be symmetric".into()));
                }
            }
        }
        let chol = cholesky_jitter(kernel.clone(), "kernel matrix")
            .map_err(|_| CviError::InvalidModel("kernel matrix is not positive semidefinite".into()))?;
        Ok(GpSpec { kernel, chol })
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn n(&self) -> usize {
        self.kernel.nrows()
    }

    /// Lower Cholesky factor of K (with jitter if it was needed).
    pub fn chol(&self) -> &Chol {
        &self.chol
    }
}

/// Random-walk chain z_0 ~ N(0, 1), z_k | z_{k-1} ~ N(z_{k-1}, sigma2), k = 1..T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanSpec {
    horizon: usize,
    sigma2: f64,
}

impl KalmanSpec {
    pub fn new(horizon: usize, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(CviError::InvalidModel(format!("transition variance must be positive, got {sigma2}")));
        }
        Ok(KalmanSpec { horizon, sigma2 })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Prior covariance of (z_0..z_T): 1 + sigma2 * min(i, j).
    pub fn chain_covariance(&self) -> DMatrix<f64> {
        let n = self.horizon + 1;
        DMatrix::from_fn(n, n, |i, j| 1.0 + self.sigma2 * i.min(j) as f64)
    }
}

/// Gamma(a, b) prior on a positive scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPriorSpec {
    pub a: f64,
    pub b: f64,
}

impl GammaPriorSpec {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(CviError::InvalidModel(format!("gamma prior needs a, b > 0, got ({a}, {b})")));
        }
        Ok(GammaPriorSpec { a, b })
    }

    pub fn prior(&self) -> NatParams {
        NatParams::new_unchecked(FamilyKind::Gamma, vec![-self.b, self.a - 1.0])
    }
}

/// The conjugate part of a model.
#[derive(Debug, Clone)]
pub enum ConjugateModelSpec {
    LinReg(LinRegSpec),
    Gp(GpSpec),
    Kalman(KalmanSpec),
    GammaPrior(GammaPriorSpec),
}

impl ConjugateModelSpec {
    /// Number of scalar targets that can carry a site.
    pub fn n_targets(&self) -> usize {
        match self {
            ConjugateModelSpec::LinReg(s) => s.n_rows(),
            ConjugateModelSpec::Gp(s) => s.n(),
            ConjugateModelSpec::Kalman(s) => s.horizon + 1,
            ConjugateModelSpec::GammaPrior(_) => 1,
        }
    }

    /// Family of the per-target marginals (and of the sites).
    pub fn site_family(&self) -> FamilyKind {
        match self {
            ConjugateModelSpec::GammaPrior(_) => FamilyKind::Gamma,
            _ => FamilyKind::GaussianScalar,
        }
    }

    /// Posterior for the given per-target sites.
    pub fn posterior(&self, sites: &[Site]) -> Result<Posterior> {
        if sites.len() != self.n_targets() {
            return Err(CviError::DimensionMismatch { expected: self.n_targets(), got: sites.len() });
        }
        if sites.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CviError::out_of_domain("non-finite site parameter"));
        }
        match self {
            ConjugateModelSpec::LinReg(s) => linreg_posterior(s, sites).map(Posterior::LinReg),
            ConjugateModelSpec::Gp(s) => gp_posterior(s, sites).map(Posterior::Gp),
            ConjugateModelSpec::Kalman(s) => kalman_marginals(s, sites).map(Posterior::Kalman),
            ConjugateModelSpec::GammaPrior(s) => gamma_posterior(s, sites[0]).map(Posterior::Gamma),
        }
    }

    /// Posterior with all sites zero.
    pub fn prior(&self) -> Result<Posterior> {
        self.posterior(&vec![[0.0, 0.0]; self.n_targets()])
    }
}

// ---------------------------------------------------------------------------
// linear regression

#[derive(Debug, Clone)]
pub enum LinRegPosterior {
    Primal {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        /// log |P| of the posterior precision
        prec_logdet: f64,
    },
    Dual {
        mean: DVector<f64>,
        /// orthonormal basis of the row space, (D+1) x N
        q: DMatrix<f64>,
        /// R of the thin factorisation X~^T = Q R
        r: DMatrix<f64>,
        /// factor of B = I + delta R W R^T
        b_chol: Chol,
        delta: f64,
    },
}

/// Posterior over regression weights given Gaussian sites on the projections x~_n^T z.
pub fn linreg_posterior(spec: &LinRegSpec, sites: &[Site]) -> Result<LinRegPosterior> {
    let x = &spec.design;
    let (n, d) = x.shape();
    if sites.len() != n {
        return Err(CviError::DimensionMismatch { expected: n, got: sites.len() });
    }
    let delta = spec.delta;
    let w: Vec<f64> = sites.iter().map(|s| -2.0 * s[1]).collect();
    let l1 = DVector::from_iterator(n, sites.iter().map(|s| s[0]));
    if spec.uses_dual() {
        let qr = x.transpose().qr();
        let q = qr.q();
        let r = qr.r();
        let mut b = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += r[(i, k)] * w[k] * r[(j, k)];
                }
                b[(i, j)] += delta * acc;
                if i != j {
                    b[(j, i)] += delta * acc;
                }
            }
        }
        let b_chol = cholesky_jitter(b, "posterior precision (dual form)")?;
        let mean = (&q * b_chol.solve(&(&r * &l1))) * delta;
        Ok(LinRegPosterior::Dual { mean, q, r, b_chol, delta })
    } else {
        let mut xw = x.clone();
        for (i, wi) in w.iter().enumerate() {
            xw.row_mut(i).scale_mut(*wi);
        }
        let mut p = x.transpose() * xw;
        for i in 0..d {
            p[(i, i)] += 1.0 / delta;
        }
        let chol = cholesky_jitter(p, "posterior precision")?;
        let mean = chol.solve(&(x.transpose() * &l1));
        let cov = chol.inverse();
        Ok(LinRegPosterior::Primal { mean, cov, prec_logdet: chol_logdet(&chol) })
    }
}

impl LinRegPosterior {
    pub fn mean(&self) -> &DVector<f64> {
        match self {
            LinRegPosterior::Primal { mean, .. } | LinRegPosterior::Dual { mean, .. } => mean,
        }
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, LinRegPosterior::Dual { .. })
    }

    /// Mean and variance of x^T z.
    pub fn project(&self, x: &DVector<f64>) -> (f64, f64) {
        match self {
            LinRegPosterior::Primal { mean, cov, .. } => (x.dot(mean), x.dot(&(cov * x))),
            LinRegPosterior::Dual { mean, q, b_chol, delta, .. } => {
                let a = q.transpose() * x;
                let resid = (x.norm_squared() - a.norm_squared()).max(0.0);
                let quad = a.dot(&b_chol.solve(&a));
                (x.dot(mean), delta * (resid + quad))
            }
        }
    }

    /// Mean and variance of x~_n^T z for design row `n`.
    pub fn project_row(&self, spec: &LinRegSpec, n: usize) -> (f64, f64) {
        match self {
            LinRegPosterior::Dual { mean, r, b_chol, delta, .. } => {
                // row n lies in the span of Q with coordinates R[:, n]
                let a = r.column(n).into_owned();
                let quad = a.dot(&b_chol.solve(&a));
                (spec.design.row(n).dot(&mean.transpose()), delta * quad)
            }
            _ => self.project(&spec.design.row(n).transpose()),
        }
    }

    /// Dense posterior covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            LinRegPosterior::Primal { cov, .. } => cov.clone(),
            LinRegPosterior::Dual { q, b_chol, delta, .. } => {
                let d = q.nrows();
                let qqt = q * q.transpose();
                let inner = q * b_chol.solve(&q.transpose());
                (DMatrix::identity(d, d) - qqt + inner) * *delta
            }
        }
    }

    /// KL(q || N(0, delta I)).
    pub fn kl_to_prior(&self, spec: &LinRegSpec) -> f64 {
        let delta = spec.delta;
        let d = spec.dim() as f64;
        match self {
            LinRegPosterior::Primal { mean, cov, prec_logdet } => {
                0.5 * (cov.trace() / delta + mean.norm_squared() / delta - d + d * delta.ln() + prec_logdet)
            }
            LinRegPosterior::Dual { mean, b_chol, .. } => {
                let n = b_chol.l_dirty().nrows() as f64;
                0.5 * (chol_trace_inverse(b_chol) - n + mean.norm_squared() / delta + chol_logdet(b_chol))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gaussian process

#[derive(Debug, Clone)]
pub enum GpPosterior {
    /// All present sites have negative second parameter: GP regression on pseudo-observations.
    PseudoObservations {
        active: Vec<usize>,
        /// factor of K_AA + diag(pseudo-variances)
        m_chol: Chol,
        alpha: DVector<f64>,
        pseudo_vars: Vec<f64>,
    },
    /// General combined-precision form with B = I + L^T W L.
    Precision { b_chol: Chol, u: DVector<f64> },
}

/// Pseudo-observation (y~_n, s~_n^2) for a Gaussian site, if it has one.
pub fn pseudo_observation(site: Site) -> Option<(f64, f64)> {
    (site[1] < 0.0).then(|| {
        let var = -0.5 / site[1];
        (site[0] * var, var)
    })
}

/// GP posterior for the given sites.
pub fn gp_posterior(spec: &GpSpec, sites: &[Site]) -> Result<GpPosterior> {
    let n = spec.n();
    if sites.len() != n {
        return Err(CviError::DimensionMismatch { expected: n, got: sites.len() });
    }
    let representable = sites
        .iter()
        .all(|s| s[1] < 0.0 || (s[1] == 0.0 && s[0] == 0.0));
    if representable {
        gp_posterior_pseudo(spec, sites)
    } else {
        gp_posterior_precision(spec, sites)
    }
}

/// GP-regression path: only valid when every present site is a proper pseudo-observation.
pub fn gp_posterior_pseudo(spec: &GpSpec, sites: &[Site]) -> Result<GpPosterior> {
    let mut active = Vec::new();
    let mut ytil = Vec::new();
    let mut vtil = Vec::new();
    for (i, s) in sites.iter().enumerate() {
        if let Some((y, v)) = pseudo_observation(*s) {
            active.push(i);
            ytil.push(y);
            vtil.push(v);
        } else if s[0] != 0.0 || s[1] != 0.0 {
            return Err(CviError::out_of_domain("site has no pseudo-observation form"));
        }
    }
    let k = &spec.kernel;
    let na = active.len();
    let kaa = DMatrix::from_fn(na, na, |i, j| k[(active[i], active[j])]);
    let mut mm = kaa.clone();
    for i in 0..na {
        mm[(i, i)] += vtil[i];
    }
    let m_chol = cholesky_jitter(mm, "pseudo-observation covariance")?;
    let alpha = m_chol.solve(&DVector::from_vec(ytil));
    Ok(GpPosterior::PseudoObservations { active, m_chol, alpha, pseudo_vars: vtil })
}

/// Combined-precision path, valid for sites of either sign.
pub fn gp_posterior_precision(spec: &GpSpec, sites: &[Site]) -> Result<GpPosterior> {
    let n = spec.n();
    let l = spec.chol.l();
    let mut lw = l.clone();
    for i in 0..n {
        lw.row_mut(i).scale_mut(-2.0 * sites[i][1]);
    }
    let b = DMatrix::identity(n, n) + l.transpose() * lw;
    let b_chol = cholesky_jitter(b, "posterior precision")?;
    let l1 = DVector::from_iterator(n, sites.iter().map(|s| s[0]));
    let u = b_chol.solve(&(l.transpose() * l1));
    Ok(GpPosterior::Precision { b_chol, u })
}

impl GpPosterior {
    /// Predictive mean and variance at a point with cross-covariances `k_star` and prior variance `k_ss`.
    pub fn predict(&self, spec: &GpSpec, k_star: &DVector<f64>, k_ss: f64) -> (f64, f64) {
        match self {
            GpPosterior::PseudoObservations { active, m_chol, alpha, .. } => {
                let ka = DVector::from_iterator(active.len(), active.iter().map(|&i| k_star[i]));
                let mean = ka.dot(alpha);
                let var = k_ss - ka.dot(&m_chol.solve(&ka));
                (mean, var)
            }
            GpPosterior::Precision { b_chol, u, .. } => {
                let a = spec
                    .chol
                    .l()
                    .solve_lower_triangular(k_star)
                    .expect("kernel factor has positive diagonal");
                let mean = a.dot(u);
                let var = k_ss - a.norm_squared() + a.dot(&b_chol.solve(&a));
                (mean, var)
            }
        }
    }

    /// Posterior mean and variance of z_i.
    pub fn marginal(&self, spec: &GpSpec, i: usize) -> (f64, f64) {
        match self {
            GpPosterior::PseudoObservations { .. } => {
                let k_star = spec.kernel.column(i).into_owned();
                self.predict(spec, &k_star, spec.kernel[(i, i)])
            }
            GpPosterior::Precision { b_chol, u, .. } => {
                let l = spec.chol.l();
                let li = l.row(i).transpose();
                let mean = li.dot(u);
                let var = li.dot(&b_chol.solve(&li));
                (mean, var)
            }
        }
    }

    /// KL(q || N(0, K)).
    pub fn kl_to_prior(&self, spec: &GpSpec) -> f64 {
        match self {
            GpPosterior::PseudoObservations { active, m_chol, alpha, pseudo_vars } => {
                let k = &spec.kernel;
                let kaa = DMatrix::from_fn(active.len(), active.len(), |i, j| k[(active[i], active[j])]);
                let tr = m_chol.solve(&kaa).trace();
                let quad = alpha.dot(&(&kaa * alpha));
                0.5 * (-tr + quad + chol_logdet(m_chol) - pseudo_vars.iter().map(|v| v.ln()).sum::<f64>())
            }
            GpPosterior::Precision { b_chol, u } => {
                0.5 * (chol_trace_inverse(b_chol) + u.norm_squared() - u.len() as f64 + chol_logdet(b_chol))
            }
        }
    }
}

/// Means and variances at `query` indices.
pub fn gp_marginals(spec: &GpSpec, sites: &[Site], query: &[usize]) -> Result<Vec<(f64, f64)>> {
    let post = gp_posterior(spec, sites)?;
    query
        .iter()
        .map(|&i| {
            if i >= spec.n() {
                Err(CviError::IndexOutOfRange { index: i, len: spec.n() })
            } else {
                Ok(post.marginal(spec, i))
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Kalman smoother

#[derive(Debug, Clone)]
pub struct KalmanPosterior {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    /// log of the normaliser of prior x exp-sites
    pub log_z: f64,
    pub kl: f64,
}

/// Forward information filter and RTS smoother over the chain, with sites on z_0..z_T.
pub fn kalman_marginals(spec: &KalmanSpec, sites: &[Site]) -> Result<KalmanPosterior> {
    let n = spec.horizon + 1;
    if sites.len() != n {
        return Err(CviError::DimensionMismatch { expected: n, got: sites.len() });
    }
    let s2 = spec.sigma2;
    let mut fm = vec![0.0; n];
    let mut fv = vec![0.0; n];
    let mut log_z = 0.0;
    let (mut pm, mut pv) = (0.0, 1.0);
    for k in 0..n {
        let prec = 1.0 / pv - 2.0 * sites[k][1];
        if !(prec > 0.0) || !prec.is_finite() {
            return Err(CviError::out_of_domain(format!("filtered precision at time {k} is {prec}")));
        }
        let v = 1.0 / prec;
        let m = v * (pm / pv + sites[k][0]);
        log_z += 0.5 * (v / pv).ln() + 0.5 * (m * m / v - pm * pm / pv);
        fm[k] = m;
        fv[k] = v;
        pm = m;
        pv = v + s2;
    }
    let mut means = fm.clone();
    let mut vars = fv.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        let pred = fv[k] + s2;
        let g = fv[k] / pred;
        means[k] = fm[k] + g * (means[k + 1] - fm[k]);
        vars[k] = fv[k] + g * g * (vars[k + 1] - pred);
        if !(vars[k] > 0.0) {
            return Err(CviError::out_of_domain(format!("smoothed variance at time {k} is {}", vars[k])));
        }
    }
    let site_term: f64 = (0..n)
        .map(|k| sites[k][0] * means[k] + sites[k][1] * (vars[k] + means[k] * means[k]))
        .sum();
    Ok(KalmanPosterior { means, vars, log_z, kl: site_term - log_z })
}

// ---------------------------------------------------------------------------
// Gamma

/// Gamma(a + l2, b - l1).
pub fn gamma_posterior(spec: &GammaPriorSpec, site: Site) -> Result<NatParams> {
    let shape = spec.a + site[1];
    let rate = spec.b - site[0];
    if !(shape > 0.0 && rate > 0.0) {
        return Err(CviError::out_of_domain(format!("gamma posterior shape {shape}, rate {rate}")));
    }
    Ok(NatParams::new_unchecked(FamilyKind::Gamma, vec![-rate, shape - 1.0]))
}

// ---------------------------------------------------------------------------

/// Result of a conjugate step.
#[derive(Debug, Clone)]
pub enum Posterior {
    LinReg(LinRegPosterior),
    Gp(GpPosterior),
    Kalman(KalmanPosterior),
    Gamma(NatParams),
}

impl Posterior {
    /// Marginal distribution of target `t`.
    pub fn marginal(&self, spec: &ConjugateModelSpec, t: usize) -> Result<NatParams> {
        let n = spec.n_targets();
        if t >= n {
            return Err(CviError::IndexOutOfRange { index: t, len: n });
        }
        match (self, spec) {
            (Posterior::LinReg(p), ConjugateModelSpec::LinReg(s)) => {
                let (m, v) = p.project_row(s, t);
                checked_gaussian(m, v)
            }
            (Posterior::Gp(p), ConjugateModelSpec::Gp(s)) => {
                let (m, v) = p.marginal(s, t);
                checked_gaussian(m, v)
            }
            (Posterior::Kalman(p), ConjugateModelSpec::Kalman(_)) => checked_gaussian(p.means[t], p.vars[t]),
            (Posterior::Gamma(q), ConjugateModelSpec::GammaPrior(_)) => Ok(q.clone()),
            _ => Err(CviError::InvalidModel("posterior does not match model".into())),
        }
    }

    /// Marginals of every target.
    pub fn marginals(&self, spec: &ConjugateModelSpec, par: Parallelism) -> Result<Vec<NatParams>> {
        match (self, spec) {
            (Posterior::LinReg(LinRegPosterior::Primal { mean, cov, .. }), ConjugateModelSpec::LinReg(s)) => {
                let xv = &s.design * cov;
                let means = &s.design * mean;
                map_range(par, s.n_rows(), |i| {
                    let v = xv.row(i).dot(&s.design.row(i));
                    checked_gaussian(means[i], v)
                })
                .into_iter()
                .collect()
            }
            (Posterior::Gp(GpPosterior::Precision { b_chol, u, .. }), ConjugateModelSpec::Gp(s)) => {
                let l = s.chol.l();
                let means = &l * u;
                let c = b_chol
                    .l()
                    .solve_lower_triangular(&l.transpose())
                    .expect("factor has positive diagonal");
                map_range(par, s.n(), |i| checked_gaussian(means[i], c.column(i).norm_squared()))
                    .into_iter()
                    .collect()
            }
            _ => map_range(par, spec.n_targets(), |t| self.marginal(spec, t))
                .into_iter()
                .collect(),
        }
    }

    /// KL(q || prior) for the full posterior.
    pub fn kl_to_prior(&self, spec: &ConjugateModelSpec) -> Result<f64> {
        match (self, spec) {
            (Posterior::LinReg(p), ConjugateModelSpec::LinReg(s)) => Ok(p.kl_to_prior(s)),
            (Posterior::Gp(p), ConjugateModelSpec::Gp(s)) => Ok(p.kl_to_prior(s)),
            (Posterior::Kalman(p), ConjugateModelSpec::Kalman(_)) => Ok(p.kl),
            (Posterior::Gamma(q), ConjugateModelSpec::GammaPrior(s)) => crate::expfam::kl(q, &s.prior()),
            _ => Err(CviError::InvalidModel("posterior does not match model".into())),
        }
    }
}

fn checked_gaussian(m: f64, v: f64) -> Result<NatParams> {
    if v > 0.0 && v.is_finite() && m.is_finite() {
        NatParams::gaussian(m, v)
    } else {
        Err(CviError::out_of_domain(format!("marginal variance {v}")))
    }
}
