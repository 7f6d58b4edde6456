//! Minimal exponential families in natural and mean coordinates.
//!
//! Sufficient statistics and parameter layouts:
//!
//! * `GaussianScalar`: phi(z) = (z, z^2), lambda = (m/v, -1/(2v)), mu = (m, v + m^2).
//! * `GaussianFull(d)`: phi(z) = (z, z z^T). Values hold `d` entries of the first
//!   block followed by the packed lower triangle of the symmetric second block.
//!   Natural: (V^{-1} m, -V^{-1}/2). Mean: (m, V + m m^T). The pairing of two
//!   parameter vectors uses the trace inner product on the matrix block.
//! * `Gamma`: phi(z) = (z, log z), lambda = (-rate, shape - 1),
//!   mu = (shape/rate, digamma(shape) - log rate).

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};

use crate::error::{CviError, Result};
use crate::linalg::{
    cholesky_strict, chol_logdet, dim_from_packed, pack_lower, packed_index, packed_len,
    unpack_symmetric,
};
use crate::special::{digamma, ln_gamma, trigamma};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Tolerance and iteration cap of the Gamma mean-to-natural Newton solve.
pub const GAMMA_NEWTON_TOL: f64 = 1e-10;
pub const GAMMA_NEWTON_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyKind {
    GaussianFull(usize),
    GaussianScalar,
    Gamma,
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FamilyKind::GaussianFull(d) => write!(f, "gaussian-full({d})"),
            FamilyKind::GaussianScalar => write!(f, "gaussian"),
            FamilyKind::Gamma => write!(f, "gamma"),
        }
    }
}

impl FamilyKind {
    /// Length of a parameter vector for this family.
    pub fn param_len(self) -> usize {
        match self {
            FamilyKind::GaussianFull(d) => d + packed_len(d),
            FamilyKind::GaussianScalar | FamilyKind::Gamma => 2,
        }
    }

    /// Weight of coordinate `k` in the pairing <a, b>.
    fn pairing_weight(self, k: usize) -> f64 {
        match self {
            FamilyKind::GaussianFull(d) if k >= d => {
                let p = k - d;
                // diagonal entries of the packed block sit at i(i+3)/2
                let mut i = 0;
                while packed_index(i, i) < p {
                    i += 1;
                }
                if packed_index(i, i) == p {
                    1.0
                } else {
                    2.0
                }
            }
            _ => 1.0,
        }
    }

    /// Inner product between a natural and a mean parameter vector.
    pub fn pairing(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            FamilyKind::GaussianFull(_) => a
                .iter()
                .zip(b)
                .enumerate()
                .map(|(k, (x, y))| self.pairing_weight(k) * x * y)
                .sum(),
            _ => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }

    /// Sufficient statistics phi(z) for a scalar point.
    pub fn suff_stats_scalar(self, z: f64) -> Result<[f64; 2]> {
        match self {
            FamilyKind::GaussianScalar => Ok([z, z * z]),
            FamilyKind::Gamma => {
                if z > 0.0 {
                    Ok([z, z.ln()])
                } else {
                    Err(CviError::out_of_domain(format!("gamma support requires z > 0, got {z}")))
                }
            }
            FamilyKind::GaussianFull(_) => Err(CviError::FamilyMismatch {
                expected: "scalar family".into(),
                got: self.to_string(),
            }),
        }
    }
}

/// Natural parameters lambda of a member of `family`.
#[derive(Debug, Clone, PartialEq)]
pub struct NatParams {
    pub family: FamilyKind,
    pub values: Vec<f64>,
}

/// Mean parameters mu = E[phi(z)] of a member of `family`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanParams {
    pub family: FamilyKind,
    pub values: Vec<f64>,
}

fn check_len(family: FamilyKind, values: &[f64]) -> Result<()> {
    if values.len() != family.param_len() {
        return Err(CviError::DimensionMismatch {
            expected: family.param_len(),
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CviError::out_of_domain("non-finite parameter"));
    }
    Ok(())
}

fn split_full(values: &[f64], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    (DVector::from_column_slice(&values[..d]), unpack_symmetric(&values[d..], d))
}

fn join_full(v: &DVector<f64>, m: &DMatrix<f64>) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().copied().collect();
    out.extend(pack_lower(m));
    out
}

impl NatParams {
    pub fn new(family: FamilyKind, values: Vec<f64>) -> Result<Self> {
        check_len(family, &values)?;
        let p = NatParams { family, values };
        p.validate()?;
        Ok(p)
    }

    /// Builds without domain validation. Length must still match.
    pub fn new_unchecked(family: FamilyKind, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), family.param_len());
        NatParams { family, values }
    }

    pub fn gaussian(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() || !mean.is_finite() {
            return Err(CviError::out_of_domain(format!("gaussian variance {var}")));
        }
        Ok(NatParams {
            family: FamilyKind::GaussianScalar,
            values: vec![mean / var, -0.5 / var],
        })
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
            return Err(CviError::out_of_domain(format!("gamma shape {shape}, rate {rate}")));
        }
        Ok(NatParams {
            family: FamilyKind::Gamma,
            values: vec![-rate, shape - 1.0],
        })
    }

    pub fn gaussian_full(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let c = cholesky_strict(cov.clone())
            .ok_or_else(|| CviError::out_of_domain("covariance is not positive definite"))?;
        let prec = c.inverse();
        let theta1 = &prec * mean;
        let theta2 = prec * -0.5;
        NatParams::new(FamilyKind::GaussianFull(d), join_full(&theta1, &theta2))
    }

    /// Membership in the natural domain Omega.
    pub fn validate(&self) -> Result<()> {
        check_len(self.family, &self.values)?;
        match self.family {
            FamilyKind::GaussianScalar => {
                if self.values[1] < 0.0 {
                    Ok(())
                } else {
                    Err(CviError::out_of_domain(format!(
                        "gaussian second natural parameter must be negative, got {}",
                        self.values[1]
                    )))
                }
            }
            FamilyKind::Gamma => {
                if self.values[0] < 0.0 && self.values[1] > -1.0 {
                    Ok(())
                } else {
                    Err(CviError::out_of_domain(format!(
                        "gamma natural parameters ({}, {}) outside the domain",
                        self.values[0], self.values[1]
                    )))
                }
            }
            FamilyKind::GaussianFull(d) => {
                let (_, t2) = split_full(&self.values, d);
                cholesky_strict(t2 * -2.0)
                    .map(|_| ())
                    .ok_or_else(|| CviError::out_of_domain("precision block is not positive definite"))
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// (mean, variance) of a scalar Gaussian.
    pub fn gaussian_moments(&self) -> Result<(f64, f64)> {
        expect_family(self.family, FamilyKind::GaussianScalar)?;
        self.validate()?;
        let v = -0.5 / self.values[1];
        Ok((self.values[0] * v, v))
    }

    /// (shape, rate) of a Gamma.
    pub fn gamma_shape_rate(&self) -> Result<(f64, f64)> {
        expect_family(self.family, FamilyKind::Gamma)?;
        self.validate()?;
        Ok((self.values[1] + 1.0, -self.values[0]))
    }

    /// Mean vector and covariance of a full Gaussian.
    pub fn gaussian_full_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = match self.family {
            FamilyKind::GaussianFull(d) => d,
            other => {
                return Err(CviError::FamilyMismatch {
                    expected: "gaussian-full".into(),
                    got: other.to_string(),
                })
            }
        };
        let (t1, t2) = split_full(&self.values, d);
        let c = cholesky_strict(t2 * -2.0)
            .ok_or_else(|| CviError::out_of_domain("precision block is not positive definite"))?;
        let cov = c.inverse();
        let mean = &cov * t1;
        Ok((mean, cov))
    }

    pub fn add(&self, other: &NatParams) -> Result<NatParams> {
        expect_family(other.family, self.family)?;
        Ok(NatParams::new_unchecked(
            self.family,
            self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn scale(&self, s: f64) -> NatParams {
        NatParams::new_unchecked(self.family, self.values.iter().map(|a| a * s).collect())
    }
}

impl MeanParams {
    pub fn new(family: FamilyKind, values: Vec<f64>) -> Result<Self> {
        check_len(family, &values)?;
        let p = MeanParams { family, values };
        p.validate()?;
        Ok(p)
    }

    pub fn new_unchecked(family: FamilyKind, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), family.param_len());
        MeanParams { family, values }
    }

    /// Membership in the mean-parameter image M.
    pub fn validate(&self) -> Result<()> {
        check_len(self.family, &self.values)?;
        match self.family {
            FamilyKind::GaussianScalar => {
                let v = self.values[1] - self.values[0] * self.values[0];
                if v > 0.0 {
                    Ok(())
                } else {
                    Err(CviError::out_of_domain(format!(
                        "gaussian mean parameters imply variance {v}"
                    )))
                }
            }
            FamilyKind::Gamma => {
                let (m1, m2) = (self.values[0], self.values[1]);
                if m1 > 0.0 && m2 < m1.ln() {
                    Ok(())
                } else {
                    Err(CviError::out_of_domain(format!(
                        "gamma mean parameters ({m1}, {m2}) violate E log z < log E z"
                    )))
                }
            }
            FamilyKind::GaussianFull(d) => {
                let (m, s) = split_full(&self.values, d);
                let cov = s - &m * m.transpose();
                cholesky_strict(cov)
                    .map(|_| ())
                    .ok_or_else(|| CviError::out_of_domain("implied covariance is not positive definite"))
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn gaussian(mean: f64, var: f64) -> Result<Self> {
        MeanParams::new(FamilyKind::GaussianScalar, vec![mean, var + mean * mean])
    }
}

fn expect_family(got: FamilyKind, expected: FamilyKind) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(CviError::FamilyMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        })
    }
}

/// Log-partition A(lambda).
pub fn log_partition(lambda: &NatParams) -> Result<f64> {
    lambda.validate()?;
    let v = &lambda.values;
    match lambda.family {
        FamilyKind::GaussianScalar => {
            Ok(-v[0] * v[0] / (4.0 * v[1]) - 0.5 * (-2.0 * v[1]).ln() + 0.5 * LN_2PI)
        }
        FamilyKind::Gamma => {
            let shape = v[1] + 1.0;
            Ok(ln_gamma(shape) - shape * (-v[0]).ln())
        }
        FamilyKind::GaussianFull(d) => {
            let (t1, t2) = split_full(v, d);
            let c = cholesky_strict(t2 * -2.0)
                .ok_or_else(|| CviError::out_of_domain("precision block is not positive definite"))?;
            let prec_logdet = chol_logdet(&c);
            let mean = c.solve(&t1);
            Ok(0.5 * t1.dot(&mean) - 0.5 * prec_logdet + 0.5 * d as f64 * LN_2PI)
        }
    }
}

/// Mean parameters mu = grad A(lambda).
pub fn nat_to_mean(lambda: &NatParams) -> Result<MeanParams> {
    lambda.validate()?;
    let v = &lambda.values;
    match lambda.family {
        FamilyKind::GaussianScalar => {
            let var = -0.5 / v[1];
            let m = v[0] * var;
            Ok(MeanParams::new_unchecked(lambda.family, vec![m, var + m * m]))
        }
        FamilyKind::Gamma => {
            let (shape, rate) = (v[1] + 1.0, -v[0]);
            Ok(MeanParams::new_unchecked(
                lambda.family,
                vec![shape / rate, digamma(shape) - rate.ln()],
            ))
        }
        FamilyKind::GaussianFull(_) => {
            let (m, cov) = lambda.gaussian_full_moments()?;
            let s = cov + &m * m.transpose();
            Ok(MeanParams::new_unchecked(lambda.family, join_full(&m, &s)))
        }
    }
}

/// Natural parameters lambda = grad A*(mu).
pub fn mean_to_nat(mu: &MeanParams) -> Result<NatParams> {
    mu.validate()?;
    let v = &mu.values;
    match mu.family {
        FamilyKind::GaussianScalar => {
            let var = v[1] - v[0] * v[0];
            Ok(NatParams::new_unchecked(mu.family, vec![v[0] / var, -0.5 / var]))
        }
        FamilyKind::Gamma => {
            let shape = gamma_shape_from_means(v[0], v[1])?;
            let rate = shape / v[0];
            Ok(NatParams::new_unchecked(mu.family, vec![-rate, shape - 1.0]))
        }
        FamilyKind::GaussianFull(d) => {
            let (m, s) = split_full(v, d);
            let cov = s - &m * m.transpose();
            NatParams::gaussian_full(&m, &cov)
        }
    }
}

/// Solves digamma(a) - log(a) = mu2 - log(mu1) for the Gamma shape a.
///
/// Safeguarded Newton: the residual is increasing in a, so a bracket is kept
/// and bisection (in log a) replaces any Newton step that leaves it.
pub fn gamma_shape_from_means(mu1: f64, mu2: f64) -> Result<f64> {
    let c = mu2 - mu1.ln();
    if !(c < 0.0) {
        return Err(CviError::out_of_domain("gamma mean parameters outside the image"));
    }
    let resid = |a: f64| digamma(a) - a.ln() - c;
    let mut a = 0.5 / -c;
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for _ in 0..GAMMA_NEWTON_MAX_ITERS {
        let r = resid(a);
        if r.abs() <= GAMMA_NEWTON_TOL * c.abs().max(1e-300).min(1.0) || r == 0.0 {
            return Ok(a);
        }
        if r > 0.0 {
            hi = hi.min(a);
        } else {
            lo = lo.max(a);
        }
        let slope = trigamma(a) - 1.0 / a;
        let mut next = a - r / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() && lo > 0.0 {
                (lo * hi).sqrt()
            } else if hi.is_finite() {
                0.5 * hi
            } else {
                2.0 * lo.max(a)
            };
        }
        if ((next - a) / a).abs() < 1e-15 {
            return Ok(next);
        }
        a = next;
    }
    let r = resid(a);
    if r.abs() <= 1e-8 * c.abs().max(1.0) {
        return Ok(a);
    }
    Err(CviError::NonConvergence {
        what: "gamma shape newton solve",
        iterations: GAMMA_NEWTON_MAX_ITERS,
    })
}

/// KL(q1 || q2) in closed form.
pub fn kl(q1: &NatParams, q2: &NatParams) -> Result<f64> {
    expect_family(q2.family, q1.family)?;
    q1.validate()?;
    q2.validate()?;
    match q1.family {
        FamilyKind::GaussianScalar => {
            let (m1, v1) = q1.gaussian_moments()?;
            let (m2, v2) = q2.gaussian_moments()?;
            let d = m1 - m2;
            Ok(0.5 * (v1 / v2 + d * d / v2 - 1.0 + (v2 / v1).ln()))
        }
        FamilyKind::Gamma => {
            let (a1, b1) = q1.gamma_shape_rate()?;
            let (a2, b2) = q2.gamma_shape_rate()?;
            Ok((a1 - a2) * digamma(a1) - ln_gamma(a1) + ln_gamma(a2) + a2 * (b1.ln() - b2.ln())
                + a1 * (b2 - b1) / b1)
        }
        FamilyKind::GaussianFull(d) => {
            let (m1, c1) = q1.gaussian_full_moments()?;
            let (m2, c2) = q2.gaussian_full_moments()?;
            let ch2 = cholesky_strict(c2)
                .ok_or_else(|| CviError::out_of_domain("covariance is not positive definite"))?;
            let ch1 = cholesky_strict(c1.clone())
                .ok_or_else(|| CviError::out_of_domain("covariance is not positive definite"))?;
            let tr = ch2.solve(&c1).trace();
            let diff = m2 - m1;
            let quad = diff.dot(&ch2.solve(&diff));
            Ok(0.5 * (tr + quad - d as f64 + chol_logdet(&ch2) - chol_logdet(&ch1)))
        }
    }
}

/// Bregman divergence of the conjugate A* between two mean parameters.
///
/// Computed from its definition A*(mu1) - A*(mu2) - <grad A*(mu2), mu1 - mu2>,
/// with A*(mu) = <lambda(mu), mu> - A(lambda(mu)).
pub fn bregman_dual(mu1: &MeanParams, mu2: &MeanParams) -> Result<f64> {
    expect_family(mu2.family, mu1.family)?;
    let l1 = mean_to_nat(mu1)?;
    let l2 = mean_to_nat(mu2)?;
    let fam = mu1.family;
    let a_star = |l: &NatParams, m: &MeanParams| -> Result<f64> {
        Ok(fam.pairing(&l.values, &m.values) - log_partition(l)?)
    };
    let diff: Vec<f64> = mu1.values.iter().zip(&mu2.values).map(|(a, b)| a - b).collect();
    Ok(a_star(&l1, mu1)? - a_star(&l2, mu2)? - fam.pairing(&l2.values, &diff))
}

/// Differential entropy of q.
pub fn entropy(q: &NatParams) -> Result<f64> {
    match q.family {
        FamilyKind::GaussianScalar => {
            let (_, v) = q.gaussian_moments()?;
            Ok(0.5 * (LN_2PI + 1.0 + v.ln()))
        }
        FamilyKind::Gamma => {
            let (a, b) = q.gamma_shape_rate()?;
            Ok(a - b.ln() + ln_gamma(a) + (1.0 - a) * digamma(a))
        }
        FamilyKind::GaussianFull(d) => {
            let (_, cov) = q.gaussian_full_moments()?;
            let c = cholesky_strict(cov)
                .ok_or_else(|| CviError::out_of_domain("covariance is not positive definite"))?;
            Ok(0.5 * (d as f64 * (LN_2PI + 1.0) + chol_logdet(&c)))
        }
    }
}

/// Fisher information F(lambda) = d mu / d lambda = Cov[phi(z)].
///
/// For `GaussianFull` the matrix is taken in the minimal coordinates where
/// off-diagonal second-moment statistics appear once (z_i z_j with i > j).
pub fn fisher_info(lambda: &NatParams) -> Result<DMatrix<f64>> {
    lambda.validate()?;
    match lambda.family {
        FamilyKind::GaussianScalar => {
            let (m, v) = lambda.gaussian_moments()?;
            Ok(DMatrix::from_row_slice(
                2,
                2,
                &[v, 2.0 * m * v, 2.0 * m * v, 2.0 * v * v + 4.0 * m * m * v],
            ))
        }
        FamilyKind::Gamma => {
            let (a, b) = lambda.gamma_shape_rate()?;
            Ok(DMatrix::from_row_slice(2, 2, &[a / (b * b), 1.0 / b, 1.0 / b, trigamma(a)]))
        }
        FamilyKind::GaussianFull(d) => {
            let (m, v) = lambda.gaussian_full_moments()?;
            let n = d + packed_len(d);
            let mut pairs = Vec::with_capacity(packed_len(d));
            for i in 0..d {
                for j in 0..=i {
                    pairs.push((i, j));
                }
            }
            let mut f = DMatrix::zeros(n, n);
            for a in 0..d {
                for b in 0..d {
                    f[(a, b)] = v[(a, b)];
                }
                for (p, &(j, k)) in pairs.iter().enumerate() {
                    let c = m[j] * v[(a, k)] + m[k] * v[(a, j)];
                    f[(a, d + p)] = c;
                    f[(d + p, a)] = c;
                }
            }
            for (p, &(i, j)) in pairs.iter().enumerate() {
                for (q, &(k, l)) in pairs.iter().enumerate() {
                    f[(d + p, d + q)] = v[(i, k)] * v[(j, l)]
                        + v[(i, l)] * v[(j, k)]
                        + m[i] * m[k] * v[(j, l)]
                        + m[i] * m[l] * v[(j, k)]
                        + m[j] * m[k] * v[(i, l)]
                        + m[j] * m[l] * v[(i, k)];
                }
            }
            Ok(f)
        }
    }
}

/// Draws `n` i.i.d. samples from q, one per row.
pub fn sample<R: Rng + ?Sized>(q: &NatParams, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    match q.family {
        FamilyKind::GaussianScalar => {
            let (m, v) = q.gaussian_moments()?;
            let s = v.sqrt();
            Ok(DMatrix::from_fn(n, 1, |_, _| {
                let e: f64 = StandardNormal.sample(rng);
                m + s * e
            }))
        }
        FamilyKind::Gamma => {
            let (a, b) = q.gamma_shape_rate()?;
            let g = GammaDist::new(a, 1.0 / b)
                .map_err(|e| CviError::out_of_domain(format!("gamma sampler: {e}")))?;
            Ok(DMatrix::from_fn(n, 1, |_, _| g.sample(rng)))
        }
        FamilyKind::GaussianFull(d) => {
            let (m, v) = q.gaussian_full_moments()?;
            let c = cholesky_strict(v)
                .ok_or_else(|| CviError::out_of_domain("covariance is not positive definite"))?;
            let l = c.l();
            let mut out = DMatrix::zeros(n, d);
            for r in 0..n {
                let eps = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
                let z = &m + &l * eps;
                out.row_mut(r).copy_from(&z.transpose());
            }
            Ok(out)
        }
    }
}

/// Scalar Gaussian marginal of coordinate `i` of a full Gaussian.
pub fn marginal(q: &NatParams, i: usize) -> Result<NatParams> {
    match q.family {
        FamilyKind::GaussianFull(d) => {
            if i >= d {
                return Err(CviError::IndexOutOfRange { index: i, len: d });
            }
            let (m, v) = q.gaussian_full_moments()?;
            NatParams::gaussian(m[i], v[(i, i)])
        }
        FamilyKind::GaussianScalar | FamilyKind::Gamma => {
            if i == 0 {
                Ok(q.clone())
            } else {
                Err(CviError::IndexOutOfRange { index: i, len: 1 })
            }
        }
    }
}

/// A distribution carried in natural coordinates with its mean coordinates computed on demand.
#[derive(Debug, Clone)]
pub struct ExpFamParams {
    nat: NatParams,
    mean: OnceLock<MeanParams>,
}

impl ExpFamParams {
    pub fn from_nat(nat: NatParams) -> Result<Self> {
        nat.validate()?;
        Ok(ExpFamParams { nat, mean: OnceLock::new() })
    }

    pub fn from_mean(mean: MeanParams) -> Result<Self> {
        let nat = mean_to_nat(&mean)?;
        let cell = OnceLock::new();
        let _ = cell.set(mean);
        Ok(ExpFamParams { nat, mean: cell })
    }

    pub fn family(&self) -> FamilyKind {
        self.nat.family
    }

    pub fn nat(&self) -> &NatParams {
        &self.nat
    }

    pub fn mean(&self) -> &MeanParams {
        self.mean
            .get_or_init(|| nat_to_mean(&self.nat).expect("natural parameters validated at construction"))
    }
}

/// Checks that `values` form a triangular packed length for `GaussianFull`.
pub fn full_dim_of(values: &[f64]) -> Option<usize> {
    // d + d(d+1)/2 = len
    (1..=4096).find(|&d| d + packed_len(d) == values.len()).filter(|&d| {
        dim_from_packed(values.len() - d) == Some(d)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn gaussian_examples() {
        let mu = MeanParams::new(FamilyKind::GaussianScalar, vec![1.0, 2.0]).unwrap();
        let l = mean_to_nat(&mu).unwrap();
        assert_eq!(l.values, vec![1.0, -0.5]);
        let std = NatParams::new(FamilyKind::GaussianScalar, vec![0.0, -0.5]).unwrap();
        assert!(close(log_partition(&std).unwrap(), 0.5 * (2.0 * std::f64::consts::PI).ln(), 1e-15));
        let shifted = NatParams::new(FamilyKind::GaussianScalar, vec![2.0, -0.5]).unwrap();
        assert!(close(
            log_partition(&shifted).unwrap(),
            2.0 + 0.5 * (2.0 * std::f64::consts::PI).ln(),
            1e-15
        ));
        assert!(MeanParams::new(FamilyKind::GaussianScalar, vec![1.0, 0.5]).is_err());
        assert!(NatParams::new(FamilyKind::GaussianScalar, vec![0.0, 0.1]).is_err());
    }

    #[test]
    fn gamma_examples() {
        let l = NatParams::new(FamilyKind::Gamma, vec![-2.0, 2.0]).unwrap();
        assert!(close(log_partition(&l).unwrap(), 2f64.ln() - 3.0 * 2f64.ln(), 1e-14));
        let mu = nat_to_mean(&l).unwrap();
        assert!(close(mu.values[0], 1.5, 1e-15));
        assert!(close(mu.values[1], digamma(3.0) - 2f64.ln(), 1e-15));
        let back = mean_to_nat(&mu).unwrap();
        assert!(close(back.values[0], -2.0, 1e-9) && close(back.values[1], 2.0, 1e-9));
        assert!(NatParams::new(FamilyKind::Gamma, vec![1.0, 1.0]).is_err());
        assert!(MeanParams::new(FamilyKind::Gamma, vec![1.0, 0.0]).is_err());
        let f = fisher_info(&NatParams::gamma(2.0, 1.0).unwrap()).unwrap();
        assert!(close(f[(0, 0)], 2.0, 1e-15) && close(f[(0, 1)], 1.0, 1e-15));
        assert!(close(f[(1, 1)], trigamma(2.0), 1e-15));
    }

    #[test]
    fn full_gaussian_examples() {
        let mut vals = vec![0.0, 0.0];
        vals.extend([1.0, 0.0, 1.0]);
        let mu = MeanParams::new(FamilyKind::GaussianFull(2), vals).unwrap();
        let l = mean_to_nat(&mu).unwrap();
        for (a, b) in l.values.iter().zip([0.0, 0.0, -0.5, 0.0, -0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        let f = fisher_info(&NatParams::new(FamilyKind::GaussianScalar, vec![0.0, -0.5]).unwrap())
            .unwrap();
        assert_eq!(f, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        assert_eq!(full_dim_of(&[0.0; 5]), Some(2));
        assert_eq!(full_dim_of(&[0.0; 4]), None);
    }

    #[test]
    fn full_gaussian_fisher_matches_mean_jacobian() {
        let m = DVector::from_vec(vec![0.3, -0.7]);
        let v = DMatrix::from_row_slice(2, 2, &[1.2, 0.4, 0.4, 0.9]);
        let l = NatParams::gaussian_full(&m, &v).unwrap();
        let f = fisher_info(&l).unwrap();
        // minimal coordinates double the off-diagonal natural parameter
        let weights = [1.0, 1.0, 1.0, 2.0, 1.0];
        let h = 1e-6;
        for k in 0..5 {
            let mut lp = l.clone();
            let mut lm = l.clone();
            lp.values[k] += h / weights[k];
            lm.values[k] -= h / weights[k];
            let mp = nat_to_mean(&lp).unwrap();
            let mm = nat_to_mean(&lm).unwrap();
            for r in 0..5 {
                let fd = (mp.values[r] - mm.values[r]) / (2.0 * h);
                assert!((fd - f[(r, k)]).abs() < 1e-6, "r={r} k={k} fd={fd} f={}", f[(r, k)]);
            }
        }
    }

    #[test]
    fn full_gaussian_kl_matches_bregman() {
        let m1 = DVector::from_vec(vec![0.3, -0.7]);
        let v1 = DMatrix::from_row_slice(2, 2, &[1.2, 0.4, 0.4, 0.9]);
        let m2 = DVector::from_vec(vec![-0.1, 0.2]);
        let v2 = DMatrix::from_row_slice(2, 2, &[0.7, -0.2, -0.2, 1.5]);
        let q1 = NatParams::gaussian_full(&m1, &v1).unwrap();
        let q2 = NatParams::gaussian_full(&m2, &v2).unwrap();
        let kl = kl(&q1, &q2).unwrap();
        let b = bregman_dual(&nat_to_mean(&q1).unwrap(), &nat_to_mean(&q2).unwrap()).unwrap();
        assert!((kl - b).abs() < 1e-10 * (1.0 + kl), "{kl} vs {b}");
    }

    #[test]
    fn newton_handles_extreme_shapes() {
        for &a in &[1e-3, 0.02, 0.5, 1.0, 7.0, 300.0, 1e5] {
            let b = 1.7;
            let mu1 = a / b;
            let mu2 = digamma(a) - b.ln();
            let got = gamma_shape_from_means(mu1, mu2).unwrap();
            assert!(((got - a) / a).abs() < 1e-7, "a={a} got={got}");
        }
    }

    #[test]
    fn lazy_dual_conversion() {
        let p = ExpFamParams::from_nat(NatParams::gaussian(1.0, 2.0).unwrap()).unwrap();
        assert_eq!(p.mean().values, vec![1.0, 3.0]);
        let q = ExpFamParams::from_mean(MeanParams::gaussian(1.0, 2.0).unwrap()).unwrap();
        assert_eq!(q.nat().values, vec![0.5, -0.25]);
    }
}
