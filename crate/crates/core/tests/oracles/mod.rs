//! Independent reference computations shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

/// Gaussian prior N(0, k) times exp(l1 z_i + l2 z_i^2) per coordinate, by explicit inversion.
pub fn condition_on_sites(k: &DMatrix<f64>, sites: &[[f64; 2]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = k.nrows();
    let mut prec = k.clone().try_inverse().expect("invertible prior covariance");
    for i in 0..n {
        prec[(i, i)] -= 2.0 * sites[i][1];
    }
    let cov = prec.try_inverse().expect("valid posterior precision");
    let l1 = DVector::from_iterator(n, sites.iter().map(|s| s[0]));
    (&cov * l1, cov)
}

/// Prior N(0, k) with observations y_j ~ N(a_j' z, s2_j), by explicit inversion.
pub fn linear_gaussian_posterior(k: &DMatrix<f64>, obs: &[(DVector<f64>, f64, f64)]) -> (DVector<f64>, DMatrix<f64>) {
    let mut prec = k.clone().try_inverse().expect("invertible prior covariance");
    let mut rhs = DVector::zeros(k.nrows());
    for (a, y, s2) in obs {
        prec += a * a.transpose() / *s2;
        rhs += a * (*y / *s2);
    }
    let cov = prec.try_inverse().expect("valid posterior precision");
    (&cov * rhs, cov)
}

/// log N(y | 0, A K A' + S) for the same observation model.
pub fn linear_gaussian_log_evidence(k: &DMatrix<f64>, obs: &[(DVector<f64>, f64, f64)]) -> f64 {
    let n = obs.len();
    let a = DMatrix::from_fn(n, k.nrows(), |i, j| obs[i].0[j]);
    let mut c = &a * k * a.transpose();
    for (i, o) in obs.iter().enumerate() {
        c[(i, i)] += o.2;
    }
    let y = DVector::from_iterator(n, obs.iter().map(|o| o.1));
    let inv = c.clone().try_inverse().unwrap();
    -0.5 * (y.dot(&(&inv * &y)) + c.determinant().ln() + n as f64 * (2.0 * PI).ln())
}

/// KL(N(m1, v1) || N(m2, v2)).
pub fn kl_gauss(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * (v1 / v2 + (m1 - m2).powi(2) / v2 - 1.0 + (v2 / v1).ln())
}

/// Grid maximiser over (m, v) of <mu(m, v), grad> - KL(N(m, v) || N(mt, vt)) / beta,
/// with mu = (m, v + m^2). Returns the best grid point and the grid spacings.
pub fn mirror_descent_grid(
    grad: [f64; 2],
    mt: f64,
    vt: f64,
    beta: f64,
    m_box: (f64, f64),
    v_box: (f64, f64),
    n: usize,
) -> ((f64, f64), (f64, f64)) {
    let dm = (m_box.1 - m_box.0) / (n - 1) as f64;
    let dv = (v_box.1 - v_box.0) / (n - 1) as f64;
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..n {
        let m = m_box.0 + i as f64 * dm;
        for j in 0..n {
            let v = v_box.0 + j as f64 * dv;
            let obj = grad[0] * m + grad[1] * (v + m * m) - kl_gauss(m, v, mt, vt) / beta;
            if obj > best.0 {
                best = (obj, m, v);
            }
        }
    }
    ((best.1, best.2), (dm, dv))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log p(y | z) for a Bernoulli-logit likelihood, written independently of the library.
pub fn logit_loglik(y: f64, z: f64) -> f64 {
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if y > 0.5 {
        if p > 0.0 { p.ln() } else { z }
    } else if q > 0.0 {
        q.ln()
    } else {
        -z
    }
}

/// E_{N(m, v)}[f] by a dense trapezoid rule on m +/- 12 sd.
pub fn gauss_expect_trapezoid(m: f64, v: f64, f: impl Fn(f64) -> f64) -> f64 {
    let s = v.sqrt();
    let n = 4000;
    let h = 24.0 / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let e = -12.0 + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * (-0.5 * e * e).exp() * f(m + s * e);
    }
    acc * h / (2.0 * PI).sqrt()
}

/// Negative ELBO of a scalar Gaussian q = N(m, v) under prior N(0, delta) and logit factors on z.
pub fn scalar_logit_neg_elbo(m: f64, v: f64, delta: f64, ys: &[f64]) -> f64 {
    let e: f64 = ys.iter().map(|&y| gauss_expect_trapezoid(m, v, |z| logit_loglik(y, z))).sum();
    kl_gauss(m, v, 0.0, delta) - e
}

/// Grid minimiser of the scalar negative ELBO above, refined twice around the best cell.
pub fn scalar_logit_grid_optimum(delta: f64, ys: &[f64]) -> (f64, f64, f64) {
    let mut m_box = (-4.0, 4.0);
    let mut v_box = (0.01, 4.0);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..3 {
        let n = 81;
        let dm = (m_box.1 - m_box.0) / (n - 1) as f64;
        let dv = (v_box.1 - v_box.0) / (n - 1) as f64;
        for i in 0..n {
            for j in 0..n {
                let (m, v) = (m_box.0 + i as f64 * dm, v_box.0 + j as f64 * dv);
                let val = scalar_logit_neg_elbo(m, v, delta, ys);
                if val < best.0 {
                    best = (val, m, v);
                }
            }
        }
        m_box = (best.1 - 2.0 * dm, best.1 + 2.0 * dm);
        v_box = ((best.2 - 2.0 * dv).max(1e-4), best.2 + 2.0 * dv);
    }
    best
}

/// Posterior moments (E z, E log z) of Ga(y | z, 1) Ga(z | a, b) by normalising on a z-grid.
pub fn gamma_shape_posterior_moments(y: f64, a: f64, b: f64) -> (f64, f64) {
    let ln_gamma = |x: f64| lanczos_ln_gamma(x);
    let log_post = |z: f64| (z - 1.0) * y.ln() - ln_gamma(z) + (a - 1.0) * z.ln() - b * z;
    // locate the mode, then integrate over a wide window in log z
    let mut peak = f64::NEG_INFINITY;
    let (lo, hi) = (-30.0f64, 8.0f64);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    for i in 0..=n {
        let u = lo + i as f64 * h;
        peak = peak.max(log_post(u.exp()) + u);
    }
    let (mut z0, mut z1, mut zl) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let u = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 } * (log_post(u.exp()) + u - peak).exp();
        z0 += w;
        z1 += w * u.exp();
        zl += w * u;
    }
    (z1 / z0, zl / z0)
}

/// Lanczos log-gamma (g = 7, n = 9), independent of the library's implementation.
pub fn lanczos_ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - lanczos_ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Negative ELBO of q = N(m, V) with V = (K^-1 + diag(lam))^-1 under prior N(0, K) and
/// Bernoulli-logit labels, with its gradient in (m, log lam).
pub fn gp_logit_objective(k_inv: &DMatrix<f64>, ln_det_k: f64, ys: &[f64], theta: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    let n = ys.len();
    let m = theta.rows(0, n).into_owned();
    let lam = DVector::from_iterator(n, theta.rows(n, n).iter().map(|r| r.exp()));
    let mut prec = k_inv.clone();
    for i in 0..n {
        prec[(i, i)] += lam[i];
    }
    let v = prec.clone().cholesky()?.inverse();
    let ln_det_v = -2.0 * prec.cholesky()?.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let kinv_m = k_inv * &m;
    let kl = 0.5 * ((k_inv * &v).trace() + m.dot(&kinv_m) - n as f64 + ln_det_k - ln_det_v);
    let mut value = kl;
    let mut grad = DVector::zeros(2 * n);
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let (mi, vi, y) = (m[i], v[(i, i)], ys[i]);
        value -= gauss_expect_trapezoid(mi, vi, |z| logit_loglik(y, z));
        let e1 = gauss_expect_trapezoid(mi, vi, |z| y - sigmoid(z));
        let e2 = gauss_expect_trapezoid(mi, vi, |z| {
            let s = sigmoid(z);
            -s * (1.0 - s)
        });
        grad[i] = kinv_m[i] - e1;
        g[i] = -0.5 * (lam[i] + e2);
    }
    for i in 0..n {
        let d: f64 = (0..n).map(|k| v[(i, k)] * v[(i, k)] * g[k]).sum();
        grad[n + i] = -d * lam[i];
    }
    Some((value, grad))
}

/// Minimises the objective above by BFGS with backtracking; returns the optimum value.
pub fn gp_logit_direct_optimum(k: &DMatrix<f64>, ys: &[f64]) -> f64 {
    let n = ys.len();
    let k_inv = k.clone().try_inverse().expect("invertible kernel");
    let ln_det_k = 2.0 * k.clone().cholesky().expect("pd kernel").l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let eval = |t: &DVector<f64>| gp_logit_objective(&k_inv, ln_det_k, ys, t);
    let mut x = DVector::from_fn(2 * n, |i, _| if i < n { 0.0 } else { 0.25f64.ln() });
    let (mut f, mut g) = eval(&x).expect("valid start");
    let mut h = DMatrix::<f64>::identity(2 * n, 2 * n);
    let mut stalled = 0;
    for _ in 0..2000 {
        if g.norm() < 1e-9 || stalled >= 5 {
            break;
        }
        let mut p = -(&h * &g);
        if p.dot(&g) >= 0.0 {
            h = DMatrix::identity(2 * n, 2 * n);
            p = -g.clone();
        }
        let mut step = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let cand = &x + &p * step;
            if let Some((fc, gc)) = eval(&cand) {
                if fc <= f + 1e-4 * step * p.dot(&g) {
                    next = Some((cand, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = next else { break };
        let s = &xn - &x;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > 1e-14 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(2 * n, 2 * n);
            let a = &i - &s * yv.transpose() * rho;
            h = &a * &h * a.transpose() + &s * s.transpose() * rho;
        }
        // the gradient has a floor set by the conditioning of K, so also stop once the value settles
        stalled = if f - fnew < 1e-13 * f.abs() { stalled + 1 } else { 0 };
        x = xn;
        f = fnew;
        g = gn;
    }
    f
}

/// Squared-exponential kernel on 1-D inputs.
pub fn se_kernel_1d(xs: &[f64], sigma_f: f64, ell: f64) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), xs.len(), |i, j| sigma_f * sigma_f * (-(xs[i] - xs[j]).powi(2) / (2.0 * ell * ell)).exp())
}
