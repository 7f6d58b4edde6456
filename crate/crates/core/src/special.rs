//! Scalar special functions: log-gamma, digamma, trigamma, the logistic
//! family and the standard normal CDF in log space.

use std::f64::consts::PI;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const SHIFT: f64 = 10.0;

/// Natural log of the gamma function for `x > 0`. NaN otherwise.
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return if x == f64::INFINITY { f64::INFINITY } else { f64::NAN };
    }
    let mut shift = 0.0;
    let mut y = x;
    // accumulate the product in chunks to avoid overflow for tiny x
    let mut prod = 1.0;
    while y < SHIFT {
        prod *= y;
        y += 1.0;
        if prod > 1e280 || prod < 1e-280 {
            shift += prod.ln();
            prod = 1.0;
        }
    }
    shift += prod.ln();
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2 * (1.0 / 1188.0 + inv2 * (-691.0 / 360360.0))))));
    (y - 0.5) * y.ln() - y + LN_SQRT_2PI + series - shift
}

/// Digamma function for `x > 0`: shifted upward by recurrence, then the asymptotic series.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) || x.is_nan() {
        return f64::NAN;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut acc = 0.0;
    let mut y = x;
    while y < SHIFT {
        acc -= 1.0 / y;
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + y.ln() - 0.5 * inv - series
}

/// Trigamma function for `x > 0`.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) || x.is_nan() {
        return f64::NAN;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut y = x;
    while y < SHIFT {
        acc += 1.0 / (y * y);
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0)))));
    acc + series
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of `softplus` for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log sigma(x), accurate in both tails.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn ln_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Phi(x) / phi(x) for x <= -5 by continued fraction.
fn mills_lower(x: f64) -> f64 {
    let t = -x;
    let mut frac = 0.0;
    for k in (1..=60).rev() {
        frac = k as f64 / (t + frac);
    }
    1.0 / (t + frac)
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// log Phi(x) with an asymptotic lower tail.
pub fn ln_norm_cdf(x: f64) -> f64 {
    if x < -5.0 {
        ln_norm_pdf(x) + mills_lower(x).ln()
    } else if x > 5.0 {
        (-0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    } else {
        norm_cdf(x).ln()
    }
}

/// phi(x) / Phi(x), the derivative of log Phi.
pub fn inv_mills(x: f64) -> f64 {
    if x < -5.0 {
        1.0 / mills_lower(x)
    } else {
        (ln_norm_pdf(x) - ln_norm_cdf(x)).exp()
    }
}

/// log of the Gaussian density N(x | m, v).
pub fn ln_gauss(x: f64, m: f64, v: f64) -> f64 {
    let d = x - m;
    -0.5 * (2.0 * PI * v).ln() - 0.5 * d * d / v
}
