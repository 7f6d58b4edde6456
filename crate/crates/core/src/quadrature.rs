//! Deterministic quadrature for one-dimensional Gaussian and Gamma expectations.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::special::{ln_gamma, trigamma};

/// Default number of Gauss-Hermite nodes used for expectations.
pub const GH_NODES: usize = 64;

/// Nodes and weights of a quadrature rule. Weights sum to the measure's mass.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Golub-Welsch on a symmetric tridiagonal Jacobi matrix with zero diagonal.
fn golub_welsch(off: &[f64], mass: f64) -> Rule {
    let n = off.len() + 1;
    let mut j = DMatrix::zeros(n, n);
    for (k, &b) in off.iter().enumerate() {
        j[(k, k + 1)] = b;
        j[(k + 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrise to remove eigen-solver asymmetry
    for k in 0..n / 2 {
        let (a, b) = (pairs[k], pairs[n - 1 - k]);
        let x = 0.5 * (b.0 - a.0);
        let w = 0.5 * (a.1 + b.1);
        pairs[k] = (-x, w);
        pairs[n - 1 - k] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

fn cache() -> &'static Mutex<HashMap<(u8, usize), Arc<Rule>>> {
    static CACHE: OnceLock<Mutex<HashMap<(u8, usize), Arc<Rule>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Gauss-Hermite rule for the standard normal weight: sum w_k f(x_k) ~ E f(eps), eps ~ N(0, 1).
pub fn gauss_hermite(n: usize) -> Arc<Rule> {
    assert!(n >= 1);
    let mut c = cache().lock().expect("quadrature cache poisoned");
    c.entry((0, n))
        .or_insert_with(|| {
            let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
            Arc::new(golub_welsch(&off, 1.0))
        })
        .clone()
}

/// Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Arc<Rule> {
    assert!(n >= 1);
    let mut c = cache().lock().expect("quadrature cache poisoned");
    c.entry((1, n))
        .or_insert_with(|| {
            let off: Vec<f64> = (1..n)
                .map(|k| {
                    let k = k as f64;
                    k / (4.0 * k * k - 1.0).sqrt()
                })
                .collect();
            Arc::new(golub_welsch(&off, 2.0))
        })
        .clone()
}

/// E f(z) for z ~ N(m, v) with an n-point rule.
pub fn gaussian_expect(m: f64, v: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let rule = gauss_hermite(n);
    let s = v.sqrt();
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&x, &w)| w * f(m + s * x))
        .sum()
}

/// Points and weights for expectations under Gamma(shape, rate), integrating over log z.
///
/// The log-density in u = log z is `shape*(u + log rate) - rate*e^u - lnGamma(shape)`.
/// Panels grow geometrically away from the mode so both the slowly decaying
/// left tail and the sharp right cutoff are resolved. Each node is
/// `(z, log z, weight)`; nodes where z underflows are dropped.
pub fn gamma_nodes(shape: f64, rate: f64) -> Vec<(f64, f64, f64)> {
    let ln_rate = rate.ln();
    let norm = ln_gamma(shape);
    let log_dens = |u: f64| shape * (u + ln_rate) - (u + ln_rate).exp() - norm;
    let mode = shape.ln() - ln_rate;
    let peak = log_dens(mode);
    let cut = peak - 48.0;
    let mut hi = 1.0f64;
    while log_dens(mode + hi) > cut {
        hi *= 1.5;
    }
    let mut lo = 1.0f64;
    while log_dens(mode - lo) > cut && lo < 1e7 {
        lo *= 1.5;
    }
    let width0 = 0.25 * trigamma(shape).sqrt().min(1.0);
    let rule = gauss_legendre(24);
    let mut out = Vec::new();
    let mut push_panel = |a: f64, b: f64| {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let u = c + h * x;
            let z = u.exp();
            if z >= f64::MIN_POSITIVE {
                out.push((z, u, w * h * log_dens(u).exp()));
            }
        }
    };
    for (extent, sign) in [(hi, 1.0), (lo, -1.0)] {
        let mut a = 0.0;
        let mut w = width0;
        while a < extent {
            let b = (a + w).min(extent);
            if sign > 0.0 {
                push_panel(mode + a, mode + b);
            } else {
                push_panel(mode - b, mode - a);
            }
            a = b;
            w *= 1.4;
        }
    }
    out
}

/// E f(z) for z ~ Gamma(shape, rate).
pub fn gamma_expect(shape: f64, rate: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    gamma_nodes(shape, rate).into_iter().map(|(z, _, w)| w * f(z)).sum()
}
