//! Concrete models: a conjugate backend plus a list of non-conjugate factors.

use nalgebra::{DMatrix, DVector};

use crate::conjugate::{ConjugateModelSpec, GammaPriorSpec, GpSpec, KalmanSpec, LinRegSpec};
use crate::error::{CviError, Result};
use crate::gradients::ScalarFunction;
use crate::special::{digamma, inv_mills, ln_gamma, ln_norm_cdf, log_sigmoid, sigmoid, trigamma};

/// Log-likelihood kinds a factor can carry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    BernoulliLogit,
    BernoulliProbit,
    /// y ~ Gamma(shape = z, rate = 1)
    GammaShape,
    /// y ~ N(z, variance); conjugate, used to check exactness
    Gaussian { variance: f64 },
}

impl Likelihood {
    pub fn name(&self) -> &'static str {
        match self {
            Likelihood::BernoulliLogit => "bernoulli-logit",
            Likelihood::BernoulliProbit => "bernoulli-probit",
            Likelihood::GammaShape => "gamma-shape",
            Likelihood::Gaussian { .. } => "gaussian",
        }
    }

    /// P(y = 1 | z) for Bernoulli kinds.
    pub fn success_prob(&self, z: f64) -> Option<f64> {
        match self {
            Likelihood::BernoulliLogit => Some(sigmoid(z)),
            Likelihood::BernoulliProbit => Some(crate::special::norm_cdf(z)),
            _ => None,
        }
    }
}

/// Which scalar latent quantity a factor reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// eta_n = x~_n^T z for design row n
    Row(usize),
    /// GP latent z_n
    Index(usize),
    /// chain state z_k
    Time(usize),
    /// the single latent of a scalar model
    Scalar,
}

impl Target {
    /// Position of the target among the backend's site slots.
    pub fn position(self) -> usize {
        match self {
            Target::Row(n) | Target::Index(n) | Target::Time(n) => n,
            Target::Scalar => 0,
        }
    }
}

/// One non-conjugate log-density term log p(y | target).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonConjugateFactor {
    pub target: Target,
    pub likelihood: Likelihood,
    pub y: f64,
}

impl NonConjugateFactor {
    pub fn new(target: Target, likelihood: Likelihood, y: f64) -> Result<Self> {
        match likelihood {
            Likelihood::BernoulliLogit | Likelihood::BernoulliProbit => {
                if y != 0.0 && y != 1.0 {
                    return Err(CviError::InvalidModel(format!("bernoulli label must be 0 or 1, got {y}")));
                }
            }
            Likelihood::GammaShape => {
                if !(y > 0.0) || !y.is_finite() {
                    return Err(CviError::InvalidModel(format!("gamma-shape observation must be positive, got {y}")));
                }
            }
            Likelihood::Gaussian { variance } => {
                if !(variance > 0.0) || !y.is_finite() {
                    return Err(CviError::InvalidModel("gaussian likelihood needs positive variance".into()));
                }
            }
        }
        Ok(NonConjugateFactor { target, likelihood, y })
    }
}

/// (value, d1, d2) of log p(y | z).
pub fn loglik_eval(factor: &NonConjugateFactor, z: f64) -> Result<(f64, f64, f64)> {
    let y = factor.y;
    match factor.likelihood {
        Likelihood::BernoulliLogit => {
            let s = sigmoid(z);
            let value = y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z);
            Ok((value, y - s, -s * (1.0 - s)))
        }
        Likelihood::BernoulliProbit => {
            let sign = 2.0 * y - 1.0;
            let t = sign * z;
            let r = inv_mills(t);
            Ok((ln_norm_cdf(t), sign * r, -r * (t + r)))
        }
        Likelihood::GammaShape => {
            if !(z > 0.0) {
                return Err(CviError::out_of_domain(format!("gamma-shape likelihood needs z > 0, got {z}")));
            }
            let ly = y.ln();
            Ok(((z - 1.0) * ly - y - ln_gamma(z), ly - digamma(z), -trigamma(z)))
        }
        Likelihood::Gaussian { variance } => {
            let d = y - z;
            Ok((
                -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - 0.5 * d * d / variance,
                d / variance,
                -1.0 / variance,
            ))
        }
    }
}

impl ScalarFunction for NonConjugateFactor {
    fn value(&self, z: f64) -> f64 {
        loglik_eval(self, z).map(|t| t.0).unwrap_or(f64::NEG_INFINITY)
    }
    fn d1(&self, z: f64) -> f64 {
        if let Likelihood::BernoulliLogit = self.likelihood {
            return self.y - sigmoid(z);
        }
        loglik_eval(self, z).map(|t| t.1).unwrap_or(f64::NAN)
    }
    fn d2(&self, z: f64) -> Option<f64> {
        if let Likelihood::BernoulliLogit = self.likelihood {
            let s = sigmoid(z);
            return Some(-s * (1.0 - s));
        }
        Some(loglik_eval(self, z).map(|t| t.2).unwrap_or(f64::NAN))
    }
    fn d1_d2(&self, z: f64) -> (f64, f64) {
        if let Likelihood::BernoulliLogit = self.likelihood {
            let s = sigmoid(z);
            return (self.y - s, -s * (1.0 - s));
        }
        loglik_eval(self, z).map(|t| (t.1, t.2)).unwrap_or((f64::NAN, f64::NAN))
    }
    fn gaussian_expectation(&self, m: f64, v: f64) -> Option<(f64, f64, f64)> {
        match self.likelihood {
            Likelihood::Gaussian { variance } => {
                let d = self.y - m;
                let e = -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - 0.5 * (d * d + v) / variance;
                Some((e, d / variance, -0.5 / variance))
            }
            _ => None,
        }
    }
}

/// Squared-exponential kernel sigma_f^2 exp(-|x - x'|^2 / (2 l^2)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub log_sigma_f: f64,
    pub log_l: f64,
}

impl KernelSpec {
    pub fn new(log_sigma_f: f64, log_l: f64) -> Result<Self> {
        if !log_sigma_f.is_finite() || !log_l.is_finite() {
            return Err(CviError::InvalidModel("kernel hyperparameters must be finite".into()));
        }
        Ok(KernelSpec { log_sigma_f, log_l })
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let sf2 = (2.0 * self.log_sigma_f).exp();
        let l2 = (2.0 * self.log_l).exp();
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        sf2 * (-0.5 * d2 / l2).exp()
    }

    pub fn variance(&self) -> f64 {
        (2.0 * self.log_sigma_f).exp()
    }

    pub fn matrix(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    pub fn cross(&self, xs: &[Vec<f64>], x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().map(|xi| self.eval(xi, x)))
    }
}

/// A conjugate backend with its non-conjugate factors.
#[derive(Debug, Clone)]
pub struct CviModel {
    pub spec: ConjugateModelSpec,
    pub factors: Vec<NonConjugateFactor>,
}

impl CviModel {
    pub fn new(spec: ConjugateModelSpec, factors: Vec<NonConjugateFactor>) -> Result<Self> {
        let n = spec.n_targets();
        for f in &factors {
            let ok = matches!(
                (&spec, f.target),
                (ConjugateModelSpec::LinReg(_), Target::Row(_))
                    | (ConjugateModelSpec::Gp(_), Target::Index(_))
                    | (ConjugateModelSpec::Kalman(_), Target::Time(_))
                    | (ConjugateModelSpec::GammaPrior(_), Target::Scalar)
            );
            if !ok {
                return Err(CviError::InvalidModel(format!("factor target {:?} does not fit the backend", f.target)));
            }
            if f.target.position() >= n {
                return Err(CviError::IndexOutOfRange { index: f.target.position(), len: n });
            }
            let gamma_backend = matches!(spec, ConjugateModelSpec::GammaPrior(_));
            let gamma_lik = matches!(f.likelihood, Likelihood::GammaShape);
            if gamma_lik && !gamma_backend {
                return Err(CviError::InvalidModel("gamma-shape factors need a positive latent".into()));
            }
        }
        Ok(CviModel { spec, factors })
    }
}

/// Maps labels in {-1, +1} or {0, 1} to {0, 1}.
pub fn normalize_labels(y: &[f64]) -> Result<Vec<f64>> {
    y.iter()
        .map(|&v| match v {
            v if v == 1.0 => Ok(1.0),
            v if v == 0.0 || v == -1.0 => Ok(0.0),
            other => Err(CviError::InvalidModel(format!("label {other} is not binary"))),
        })
        .collect()
}

/// Design matrix with a leading column of ones.
pub fn with_bias(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Bayesian logistic regression with prior N(0, delta I) on [bias, weights].
pub fn build_blr(x: &DMatrix<f64>, y: &[f64], delta: f64) -> Result<CviModel> {
    build_glm(x, y, delta, Likelihood::BernoulliLogit)
}

/// Linear-predictor model with any Bernoulli likelihood.
pub fn build_glm(x: &DMatrix<f64>, y: &[f64], delta: f64, likelihood: Likelihood) -> Result<CviModel> {
    if x.nrows() != y.len() {
        return Err(CviError::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    let labels = normalize_labels(y)?;
    let spec = LinRegSpec::new(with_bias(x), delta)?;
    let factors = labels
        .iter()
        .enumerate()
        .map(|(n, &l)| NonConjugateFactor::new(Target::Row(n), likelihood, l))
        .collect::<Result<Vec<_>>>()?;
    CviModel::new(ConjugateModelSpec::LinReg(spec), factors)
}

/// Bias-plus-weights regression with Gaussian likelihoods, a conjugate model in disguise.
pub fn build_gaussian_linreg(x: &DMatrix<f64>, y: &[f64], delta: f64, noise: f64) -> Result<CviModel> {
    if x.nrows() != y.len() {
        return Err(CviError::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    let spec = LinRegSpec::new(with_bias(x), delta)?;
    let factors = y
        .iter()
        .enumerate()
        .map(|(n, &v)| NonConjugateFactor::new(Target::Row(n), Likelihood::Gaussian { variance: noise }, v))
        .collect::<Result<Vec<_>>>()?;
    CviModel::new(ConjugateModelSpec::LinReg(spec), factors)
}

/// GP classification with a squared-exponential kernel.
pub fn build_gpc(xs: &[Vec<f64>], y: &[f64], kernel: KernelSpec, likelihood: Likelihood) -> Result<CviModel> {
    if xs.is_empty() {
        return Err(CviError::InvalidModel("GP classification needs at least one point".into()));
    }
    if xs.len() != y.len() {
        return Err(CviError::DimensionMismatch { expected: xs.len(), got: y.len() });
    }
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) {
        return Err(CviError::InvalidModel("inputs have inconsistent dimension".into()));
    }
    let labels = normalize_labels(y)?;
    build_gp_with_kernel(kernel.matrix(xs), &labels, likelihood)
}

/// GP model from an explicit kernel matrix.
pub fn build_gp_with_kernel(k: DMatrix<f64>, y: &[f64], likelihood: Likelihood) -> Result<CviModel> {
    if k.nrows() != y.len() {
        return Err(CviError::DimensionMismatch { expected: k.nrows(), got: y.len() });
    }
    let spec = GpSpec::new(k)?;
    let factors = y
        .iter()
        .enumerate()
        .map(|(n, &v)| NonConjugateFactor::new(Target::Index(n), likelihood, v))
        .collect::<Result<Vec<_>>>()?;
    CviModel::new(ConjugateModelSpec::Gp(spec), factors)
}

/// Random-walk chain of length T with a Bernoulli-logit observation at each time 1..T.
pub fn build_kalman_glm(y: &[f64], sigma2: f64) -> Result<CviModel> {
    let obs: Vec<Option<f64>> = y.iter().map(|&v| Some(v)).collect();
    build_kalman_glm_partial(&obs, sigma2)
}

/// As [`build_kalman_glm`] with missing observations at some times.
pub fn build_kalman_glm_partial(y: &[Option<f64>], sigma2: f64) -> Result<CviModel> {
    if y.is_empty() {
        return Err(CviError::InvalidModel("chain needs at least one time step".into()));
    }
    let spec = KalmanSpec::new(y.len(), sigma2)?;
    let mut factors = Vec::new();
    for (k, v) in y.iter().enumerate() {
        if let Some(v) = v {
            let l = normalize_labels(&[*v])?[0];
            factors.push(NonConjugateFactor::new(Target::Time(k + 1), Likelihood::BernoulliLogit, l)?);
        }
    }
    CviModel::new(ConjugateModelSpec::Kalman(spec), factors)
}

/// Scalar z ~ Gamma(a, b) with observations y_i ~ Gamma(shape = z, rate = 1).
pub fn build_gamma_shape(y: &[f64], a: f64, b: f64) -> Result<CviModel> {
    let spec = GammaPriorSpec::new(a, b)?;
    let factors = y
        .iter()
        .map(|&v| NonConjugateFactor::new(Target::Scalar, Likelihood::GammaShape, v))
        .collect::<Result<Vec<_>>>()?;
    CviModel::new(ConjugateModelSpec::GammaPrior(spec), factors)
}
