//! The CVI iteration: site recursion, conjugate step, constraint guard and run loop.
//!
//! Sites start at zero so the first posterior is the prior. Each iteration
//! estimates the mean-parameter gradient of every factor at its current
//! marginal, mixes it into the factor's site with weight beta, and recomputes
//! the posterior by conjugate inference on prior x exp(sites).

use rand::seq::index::sample as sample_indices;

use crate::conjugate::{ConjugateModelSpec, Posterior, Site};
use crate::error::{CviError, Result};
use crate::expfam::NatParams;
use crate::gradients::{exact_expectation, mean_grad, GradMode};
use crate::models::CviModel;
use crate::par::{map_range, try_map_range, Parallelism};
use crate::rng::{substream, Stream};
use crate::trace::{Clock, RunTrace, TraceRow};

/// Default cap on step halvings.
pub const GUARD_MAX_HALVINGS: usize = 30;
/// Window (iterations) of the relative-ELBO stopping rule.
pub const STOP_WINDOW: usize = 5;

/// Constant step size, given directly or as w with beta = w / (1 + w).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    Ratio(f64),
}

impl StepSchedule {
    pub fn beta(self) -> f64 {
        match self {
            StepSchedule::Constant(b) => b,
            StepSchedule::Ratio(w) => w / (1.0 + w),
        }
    }

    pub fn validate(self) -> Result<()> {
        let b = self.beta();
        if b > 0.0 && b <= 1.0 {
            Ok(())
        } else {
            Err(CviError::InvalidConfig(format!("step size must lie in (0, 1], got {b}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CviConfig {
    pub schedule: StepSchedule,
    pub grad_mode: GradMode,
    pub max_iters: usize,
    /// Factors per iteration for the doubly-stochastic loop.
    pub minibatch: Option<usize>,
    pub seed: u64,
    pub guard_max_halvings: usize,
    /// Relative change of the negative ELBO over the stopping window.
    pub tolerance: Option<f64>,
    pub parallelism: Parallelism,
    /// Record wall-clock time in the trace.
    pub record_time: bool,
    /// Compute the negative ELBO every iteration.
    pub track_elbo: bool,
}

impl Default for CviConfig {
    fn default() -> Self {
        CviConfig {
            schedule: StepSchedule::Constant(1.0),
            grad_mode: GradMode::MonteCarlo { samples: 10 },
            max_iters: 100,
            minibatch: None,
            seed: 0,
            guard_max_halvings: GUARD_MAX_HALVINGS,
            tolerance: None,
            parallelism: Parallelism::default(),
            record_time: true,
            track_elbo: true,
        }
    }
}

impl CviConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.max_iters == 0 {
            return Err(CviError::InvalidConfig("max_iters must be at least 1".into()));
        }
        if let GradMode::MonteCarlo { samples: 0 } = self.grad_mode {
            return Err(CviError::InvalidConfig("mc_samples must be at least 1".into()));
        }
        if self.minibatch == Some(0) {
            return Err(CviError::InvalidConfig("minibatch must be at least 1".into()));
        }
        if self.guard_max_halvings == 0 {
            return Err(CviError::InvalidConfig("guard_max_halvings must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-factor sites and the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteState {
    pub sites: Vec<Site>,
    pub t: usize,
}

impl SiteState {
    pub fn zeros(n_factors: usize) -> Self {
        SiteState { sites: vec![[0.0, 0.0]; n_factors], t: 0 }
    }
}

/// (1 - beta) prev + beta g.
pub fn site_update(prev: &[f64], g: &[f64], beta: f64) -> Result<Vec<f64>> {
    if prev.len() != g.len() {
        return Err(CviError::DimensionMismatch { expected: prev.len(), got: g.len() });
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(CviError::InvalidConfig(format!("step size must lie in (0, 1], got {beta}")));
    }
    Ok(prev.iter().zip(g).map(|(p, gi)| (1.0 - beta) * p + beta * gi).collect())
}

/// Sums per-factor sites onto the backend's targets.
pub fn aggregate_sites(model: &CviModel, sites: &[Site]) -> Vec<Site> {
    let mut out = vec![[0.0, 0.0]; model.spec.n_targets()];
    for (f, s) in model.factors.iter().zip(sites) {
        let t = f.target.position();
        out[t][0] += s[0];
        out[t][1] += s[1];
    }
    out
}

/// Posterior for prior x exp(sum of sites).
pub fn conjugate_step(state: &SiteState, model: &CviModel) -> Result<Posterior> {
    if state.sites.len() != model.factors.len() {
        return Err(CviError::DimensionMismatch { expected: model.factors.len(), got: state.sites.len() });
    }
    model.spec.posterior(&aggregate_sites(model, &state.sites))
}

/// Outcome of the constraint guard.
#[derive(Debug, Clone)]
pub struct GuardOutcome {
    pub sites: Vec<Site>,
    pub posterior: Posterior,
    /// beta * 2^-halvings, or 0 if no candidate was valid
    pub beta: f64,
    pub halvings: usize,
    pub exhausted: bool,
}

/// Shrinks the step toward `prev` by halving until the posterior is valid.
///
/// Candidate k is prev + 2^-k (proposed - prev). `prev_posterior` is returned
/// when every candidate up to `max_halvings` fails.
pub fn guard_step(
    proposed: &[Site],
    prev: &[Site],
    prev_posterior: &Posterior,
    model: &CviModel,
    beta: f64,
    max_halvings: usize,
) -> GuardOutcome {
    let mut scale = 1.0;
    for k in 0..=max_halvings {
        let cand: Vec<Site> = if k == 0 {
            proposed.to_vec()
        } else {
            prev.iter()
                .zip(proposed)
                .map(|(p, q)| [p[0] + scale * (q[0] - p[0]), p[1] + scale * (q[1] - p[1])])
                .collect()
        };
        if let Ok(post) = model.spec.posterior(&aggregate_sites(model, &cand)) {
            return GuardOutcome { sites: cand, posterior: post, beta: beta * scale, halvings: k, exhausted: false };
        }
        scale *= 0.5;
    }
    GuardOutcome {
        sites: prev.to_vec(),
        posterior: prev_posterior.clone(),
        beta: 0.0,
        halvings: max_halvings,
        exhausted: true,
    }
}

/// Marginals at the given targets; the batched routine is used when all are requested.
pub fn marginals_at(post: &Posterior, spec: &ConjugateModelSpec, targets: &[usize], par: Parallelism) -> Result<Vec<NatParams>> {
    let n = spec.n_targets();
    if targets.len() == n && targets.iter().enumerate().all(|(i, &t)| i == t) {
        return post.marginals(spec, par);
    }
    try_map_range(par, targets.len(), |i| post.marginal(spec, targets[i]))
}

/// Negative ELBO: KL(q || prior) - sum_n E_q log p(y_n | target_n), expectations by quadrature.
pub fn neg_elbo(model: &CviModel, post: &Posterior, marginals: &[NatParams], par: Parallelism) -> Result<f64> {
    let kl = post.kl_to_prior(&model.spec)?;
    let terms = map_range(par, model.factors.len(), |i| {
        let f = &model.factors[i];
        exact_expectation(f, &marginals[f.target.position()])
    });
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(kl - total)
}

/// Evaluation callback: returns (train log-loss, test log-loss) for a posterior.
pub type EvalHook<'a> = dyn FnMut(usize, &Posterior) -> Result<(f64, f64)> + 'a;

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct CviRun {
    pub posterior: Posterior,
    pub state: SiteState,
    pub trace: RunTrace,
    /// True when the stopping rule ended the run before `max_iters`.
    pub converged: bool,
}

/// Runs CVI with all factors updated every iteration.
pub fn run_cvi(model: &CviModel, cfg: &CviConfig, hook: Option<&mut EvalHook<'_>>) -> Result<CviRun> {
    let mut cfg = cfg.clone();
    cfg.minibatch = None;
    run_loop(model, &cfg, hook)
}

/// Runs CVI updating a random minibatch of factors each iteration.
///
/// Selected sites move to (1 - beta) prev + beta (N/B) g, the rest decay to (1 - beta) prev.
pub fn run_cvi_doubly_stochastic(model: &CviModel, cfg: &CviConfig, hook: Option<&mut EvalHook<'_>>) -> Result<CviRun> {
    let b = cfg
        .minibatch
        .ok_or_else(|| CviError::InvalidConfig("doubly-stochastic run needs a minibatch size".into()))?;
    if b > model.factors.len() {
        return Err(CviError::InvalidConfig(format!(
            "minibatch {b} exceeds the number of factors {}",
            model.factors.len()
        )));
    }
    run_loop(model, cfg, hook)
}

/// Sorted minibatch of factor indices for iteration `t`.
pub fn minibatch_indices(seed: u64, t: usize, n: usize, b: usize) -> Vec<usize> {
    let mut rng = substream(seed, Stream::Minibatch, t as u64, 0);
    let mut idx = sample_indices(&mut rng, n, b).into_vec();
    idx.sort_unstable();
    idx
}

/// Sites after one step from `prev` given per-factor gradients for the selected factors.
pub fn propose_sites(prev: &[Site], selected: &[usize], grads: &[Vec<f64>], beta: f64, scale: f64) -> Vec<Site> {
    let mut out: Vec<Site> = prev.iter().map(|p| [(1.0 - beta) * p[0], (1.0 - beta) * p[1]]).collect();
    for (&i, g) in selected.iter().zip(grads) {
        out[i][0] += beta * (scale * g[0]);
        out[i][1] += beta * (scale * g[1]);
    }
    out
}

/// Per-factor gradients at the current posterior for the selected factors.
pub fn factor_gradients(
    model: &CviModel,
    post: &Posterior,
    selected: &[usize],
    cfg: &CviConfig,
    t: usize,
    all_marginals: Option<&[NatParams]>,
) -> Result<Vec<Vec<f64>>> {
    let targets: Vec<usize> = selected.iter().map(|&i| model.factors[i].target.position()).collect();
    let (uniq, margs) = match all_marginals {
        Some(m) => ((0..m.len()).collect::<Vec<_>>(), None),
        None => {
            let mut uniq = targets.clone();
            uniq.sort_unstable();
            uniq.dedup();
            let m = marginals_at(post, &model.spec, &uniq, cfg.parallelism)?;
            (uniq, Some(m))
        }
    };
    let margs: &[NatParams] = match (&margs, all_marginals) {
        (Some(m), _) => m,
        (None, Some(m)) => m,
        (None, None) => unreachable!(),
    };
    try_map_range(cfg.parallelism, selected.len(), |k| {
        let i = selected[k];
        let pos = uniq.binary_search(&targets[k]).expect("target collected above");
        let mut rng = substream(cfg.seed, Stream::MonteCarlo, t as u64, i as u64);
        mean_grad(&model.factors[i], &margs[pos], cfg.grad_mode, &mut rng).map(|g| g.g)
    })
}

fn run_loop(model: &CviModel, cfg: &CviConfig, mut hook: Option<&mut EvalHook<'_>>) -> Result<CviRun> {
    cfg.validate()?;
    let clock = Clock::start(cfg.record_time);
    let n = model.factors.len();
    let beta = cfg.schedule.beta();
    let mut state = SiteState::zeros(n);
    let mut post = conjugate_step(&state, model)?;
    let mut trace = RunTrace::default();
    let mut converged = false;
    let all: Vec<usize> = (0..n).collect();
    let all_targets: Vec<usize> = (0..model.spec.n_targets()).collect();
    let mut cached: Option<Vec<NatParams>> = None;
    for t in 1..=cfg.max_iters {
        let (selected, scale) = match cfg.minibatch {
            Some(b) if b < n => (minibatch_indices(cfg.seed, t, n, b), n as f64 / b as f64),
            _ => (all.clone(), 1.0),
        };
        let full = selected.len() == n;
        let cache = if full { cached.take() } else { None };
        let cache = match cache {
            Some(c) => Some(c),
            None if full => Some(marginals_at(&post, &model.spec, &all_targets, cfg.parallelism).map_err(|e| e.at_iteration(t))?),
            None => None,
        };
        let grads = factor_gradients(model, &post, &selected, cfg, t, cache.as_deref()).map_err(|e| e.at_iteration(t))?;
        let proposed = propose_sites(&state.sites, &selected, &grads, beta, scale);
        let guard = guard_step(&proposed, &state.sites, &post, model, beta, cfg.guard_max_halvings);
        state = SiteState { sites: guard.sites, t };
        post = guard.posterior;

        let neg = if cfg.track_elbo {
            let margs = marginals_at(&post, &model.spec, &all_targets, cfg.parallelism).map_err(|e| e.at_iteration(t))?;
            let v = neg_elbo(model, &post, &margs, cfg.parallelism).map_err(|e| e.at_iteration(t))?;
            cached = Some(margs);
            v
        } else {
            f64::NAN
        };
        let (train, test) = match hook.as_mut() {
            Some(h) => h(t, &post).map_err(|e| e.at_iteration(t))?,
            None => (f64::NAN, f64::NAN),
        };
        trace.push(TraceRow {
            iter: t,
            elapsed_ms: clock.elapsed_ms(),
            neg_elbo: neg,
            train_logloss: train,
            test_logloss: test,
            guard_halvings: guard.halvings,
            beta_eff: guard.beta,
            guard_exhausted: guard.exhausted,
        });
        if let Some(tol) = cfg.tolerance {
            if stop_rule(&trace, tol) {
                converged = true;
                break;
            }
        }
    }
    Ok(CviRun { posterior: post, state, trace, converged })
}

/// Relative change of the negative ELBO across the last window below `tol`.
pub fn stop_rule(trace: &RunTrace, tol: f64) -> bool {
    let rows = &trace.rows;
    if rows.len() <= STOP_WINDOW {
        return false;
    }
    let now = rows[rows.len() - 1].neg_elbo;
    let then = rows[rows.len() - 1 - STOP_WINDOW].neg_elbo;
    if !now.is_finite() || !then.is_finite() {
        return false;
    }
    (now - then).abs() / now.abs().max(1.0) < tol
}
