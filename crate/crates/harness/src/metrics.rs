//! Predictive probabilities and base-2 log-loss.

use cvi::models::Likelihood;
use cvi::special::{norm_cdf, sigmoid};
use cvi::{CviError, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Monte Carlo draws per predictive probability.
pub const METRIC_SAMPLES: usize = 500;

const CLAMP: f64 = 1e-12;

/// -[y log2 p + (1 - y) log2 (1 - p)] with p clamped away from 0 and 1.
pub fn log_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(CLAMP, 1.0 - CLAMP);
    -(y * p.log2() + (1.0 - y) * (1.0 - p).log2())
}

pub fn mean_log_loss(p: &[f64], y: &[f64]) -> f64 {
    if p.is_empty() {
        return f64::NAN;
    }
    p.iter().zip(y).map(|(&p, &y)| log_loss(p, y)).sum::<f64>() / p.len() as f64
}

/// E_q[p(y = 1 | eta)] for eta ~ N(m, v): closed form under probit, MC with `samples` draws under logit.
pub fn predictive_prob<R: Rng + ?Sized>(m: f64, v: f64, likelihood: Likelihood, samples: usize, rng: &mut R) -> Result<f64> {
    if !(v >= 0.0) || !m.is_finite() || !v.is_finite() {
        return Err(CviError::out_of_domain(format!("predictive moments ({m}, {v})")));
    }
    match likelihood {
        Likelihood::BernoulliProbit => Ok(norm_cdf(m / (1.0 + v).sqrt())),
        Likelihood::BernoulliLogit => {
            if samples == 0 {
                return Err(CviError::InvalidConfig("predictive_prob needs at least one sample".into()));
            }
            let s = v.sqrt();
            let mut acc = 0.0;
            for _ in 0..samples {
                let e: f64 = rng.sample(StandardNormal);
                acc += sigmoid(m + s * e);
            }
            Ok(acc / samples as f64)
        }
        other => Err(CviError::FamilyMismatch { expected: "bernoulli likelihood".into(), got: other.name().into() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_loss_examples() {
        assert_eq!(log_loss(0.5, 1.0), 1.0);
        assert_eq!(log_loss(0.5, 0.0), 1.0);
        assert!(log_loss(1.0, 1.0).abs() < 1e-11);
        assert_eq!(log_loss(0.25, 1.0), 2.0);
        assert!(log_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn predictive_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = (0.88f64 / 0.12).ln();
        let p = predictive_prob(z, 1e-12, Likelihood::BernoulliLogit, 100, &mut rng).unwrap();
        assert!((p - 0.88).abs() < 1e-6);
        assert!(predictive_prob(0.0, 1.0, Likelihood::GammaShape, 10, &mut rng).is_err());
    }
}
