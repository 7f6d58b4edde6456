//! Mean-field CVI over a Bayesian network.
//!
//! Each node i keeps a natural parameter lambda_i. An update collects, from every
//! factor touching the node, the expected conjugate message plus a mean-parameter
//! gradient of the factor's non-conjugate part, then moves lambda_i a step of size
//! beta toward the sum. With no non-conjugate parts and beta = 1 this is VMP.

use nalgebra::DVector;

use crate::cvi::{minibatch_indices, stop_rule, CviConfig};
use crate::error::{CviError, Result};
use crate::expfam::{entropy, fisher_info, nat_to_mean, FamilyKind, NatParams};
use crate::gradients::{exact_expectation, mean_grad, GradMode, ScalarFunction};
use crate::models::{Likelihood, NonConjugateFactor, Target};
use crate::par::try_map_range;
use crate::quadrature::{gamma_nodes, gauss_hermite, GH_NODES};
use crate::rng::{substream, Stream};
use crate::special::ln_gamma;
use crate::trace::{Clock, RunTrace, TraceRow};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A term p(x_a | x_pa(a)) of the joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factor {
    /// z_node ~ N(mean, var)
    GaussianPrior { node: usize, mean: f64, var: f64 },
    /// z_child ~ N(z_parent, var)
    GaussianChain { parent: usize, child: usize, var: f64 },
    /// observed y ~ N(z_node, var)
    GaussianObs { node: usize, y: f64, var: f64 },
    /// observed y in {0, 1} with P(y = 1) = sigmoid(z_node)
    LogitObs { node: usize, y: f64 },
    /// z_node ~ Gamma(a, b) with rate b
    GammaPrior { node: usize, a: f64, b: f64 },
    /// observed y ~ Gamma(shape = z_node, rate = 1)
    GammaShapeObs { node: usize, y: f64 },
}

impl Factor {
    /// Latent nodes the factor touches.
    pub fn nodes(&self) -> Vec<usize> {
        match *self {
            Factor::GaussianChain { parent, child, .. } => vec![parent, child],
            Factor::GaussianPrior { node, .. }
            | Factor::GaussianObs { node, .. }
            | Factor::LogitObs { node, .. }
            | Factor::GammaPrior { node, .. }
            | Factor::GammaShapeObs { node, .. } => vec![node],
        }
    }

    fn node_family(&self) -> FamilyKind {
        match self {
            Factor::GammaPrior { .. } | Factor::GammaShapeObs { .. } => FamilyKind::Gamma,
            _ => FamilyKind::GaussianScalar,
        }
    }

    /// The non-conjugate part seen by node `i`, if any.
    pub fn non_conjugate(&self, i: usize) -> Option<NonConjugateFactor> {
        match *self {
            Factor::LogitObs { node, y } if node == i => Some(NonConjugateFactor { target: Target::Scalar, likelihood: Likelihood::BernoulliLogit, y }),
            Factor::GammaShapeObs { node, y } if node == i => Some(NonConjugateFactor { target: Target::Scalar, likelihood: Likelihood::GammaShape, y }),
            _ => None,
        }
    }
}

/// Latent nodes with their families and starting parameters, plus the factor list.
#[derive(Debug, Clone)]
pub struct BayesNet {
    init: Vec<NatParams>,
    factors: Vec<Factor>,
    neighbors: Vec<Vec<usize>>,
    /// Position of each factor among those with a non-conjugate part.
    nc_index: Vec<Option<usize>>,
}

impl BayesNet {
    pub fn new() -> Self {
        BayesNet { init: Vec::new(), factors: Vec::new(), neighbors: Vec::new(), nc_index: Vec::new() }
    }

    /// Adds a latent node starting at `init`; returns its index.
    pub fn add_node(&mut self, init: NatParams) -> Result<usize> {
        init.validate()?;
        if !matches!(init.family, FamilyKind::GaussianScalar | FamilyKind::Gamma) {
            return Err(CviError::InvalidModel(format!("nodes must be scalar, got {}", init.family)));
        }
        self.init.push(init);
        self.neighbors.push(Vec::new());
        Ok(self.init.len() - 1)
    }

    pub fn add_factor(&mut self, f: Factor) -> Result<usize> {
        let valid = match f {
            Factor::GaussianPrior { mean, var, .. } => mean.is_finite() && var > 0.0,
            Factor::GaussianChain { parent, child, var } => parent != child && var > 0.0,
            Factor::GaussianObs { y, var, .. } => y.is_finite() && var > 0.0,
            Factor::LogitObs { y, .. } => y == 0.0 || y == 1.0,
            Factor::GammaPrior { a, b, .. } => a > 0.0 && b > 0.0,
            Factor::GammaShapeObs { y, .. } => y > 0.0 && y.is_finite(),
        };
        if !valid {
            return Err(CviError::InvalidModel(format!("invalid factor {f:?}")));
        }
        for n in f.nodes() {
            let Some(q) = self.init.get(n) else {
                return Err(CviError::IndexOutOfRange { index: n, len: self.init.len() });
            };
            if q.family != f.node_family() {
                return Err(CviError::FamilyMismatch { expected: f.node_family().to_string(), got: q.family.to_string() });
            }
        }
        let a = self.factors.len();
        for n in f.nodes() {
            self.neighbors[n].push(a);
        }
        let has_nc = f.nodes().iter().any(|&n| f.non_conjugate(n).is_some());
        let next = self.nc_index.iter().flatten().count();
        self.nc_index.push(has_nc.then_some(next));
        self.factors.push(f);
        Ok(a)
    }

    pub fn n_nodes(&self) -> usize {
        self.init.len()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Factor indices touching node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn initial_state(&self) -> Vec<NodeState> {
        self.init
            .iter()
            .map(|q| NodeState { lambda: q.clone(), lambda_tilde: vec![0.0; q.values.len()] })
            .collect()
    }
}

impl Default for BayesNet {
    fn default() -> Self {
        Self::new()
    }
}

/// Current q_i and the last message sum.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub lambda: NatParams,
    pub lambda_tilde: Vec<f64>,
}

fn gauss_moments(state: &[NodeState], j: usize) -> Result<(f64, f64)> {
    state[j].lambda.gaussian_moments()
}

/// Expected natural-parameter message of factor `a` to node `i` under the other nodes' q.
pub fn conjugate_message(net: &BayesNet, state: &[NodeState], a: usize, i: usize) -> Result<Vec<f64>> {
    let f = net.factors.get(a).ok_or(CviError::IndexOutOfRange { index: a, len: net.factors.len() })?;
    if !f.nodes().contains(&i) {
        return Err(CviError::InvalidModel(format!("factor {a} does not touch node {i}")));
    }
    Ok(match *f {
        Factor::GaussianPrior { mean, var, .. } => vec![mean / var, -0.5 / var],
        Factor::GaussianObs { y, var, .. } => vec![y / var, -0.5 / var],
        Factor::GaussianChain { parent, child, var } => {
            let other = if i == child { parent } else { child };
            let (m, _) = gauss_moments(state, other)?;
            vec![m / var, -0.5 / var]
        }
        Factor::GammaPrior { a, b, .. } => vec![-b, a - 1.0],
        Factor::LogitObs { .. } | Factor::GammaShapeObs { .. } => vec![0.0, 0.0],
    })
}

/// Sub-stream coordinate for the non-conjugate part of factor `a` at node `i`.
fn stream_key(net: &BayesNet, a: usize, i: usize) -> u64 {
    let k = net.nc_index[a].expect("factor has a non-conjugate part");
    (k * net.n_nodes() + i) as u64
}

/// lambda~_i = sum over neighbouring factors of (message + non-conjugate gradient).
pub fn message_sum(net: &BayesNet, state: &[NodeState], i: usize, mode: GradMode, seed: u64, t: usize) -> Result<Vec<f64>> {
    let q = &state[i].lambda;
    let mut sum = vec![0.0; q.values.len()];
    for &a in &net.neighbors[i] {
        let msg = conjugate_message(net, state, a, i)?;
        for (s, m) in sum.iter_mut().zip(&msg) {
            *s += m;
        }
        if let Some(nc) = net.factors[a].non_conjugate(i) {
            let mut rng = substream(seed, Stream::MonteCarlo, t as u64, stream_key(net, a, i));
            let g = mean_grad(&nc, q, mode, &mut rng)?;
            for (s, gk) in sum.iter_mut().zip(&g.g) {
                *s += gk;
            }
        }
    }
    Ok(sum)
}

/// Result of one node update.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeUpdate {
    pub state: NodeState,
    pub beta: f64,
    pub halvings: usize,
    pub exhausted: bool,
}

/// (1 - beta) lambda_i + beta lambda~_i, halving beta while the result is invalid.
pub fn node_update(net: &BayesNet, state: &[NodeState], i: usize, beta: f64, cfg: &CviConfig, t: usize) -> Result<NodeUpdate> {
    if i >= net.n_nodes() {
        return Err(CviError::IndexOutOfRange { index: i, len: net.n_nodes() });
    }
    let tilde = message_sum(net, state, i, cfg.grad_mode, cfg.seed, t)?;
    let prev = &state[i].lambda;
    let mut b = beta;
    for k in 0..=cfg.guard_max_halvings {
        let values: Vec<f64> = prev.values.iter().zip(&tilde).map(|(p, g)| (1.0 - b) * p + b * g).collect();
        if let Ok(lambda) = NatParams::new(prev.family, values) {
            return Ok(NodeUpdate { state: NodeState { lambda, lambda_tilde: tilde }, beta: b, halvings: k, exhausted: false });
        }
        b *= 0.5;
    }
    Ok(NodeUpdate {
        state: NodeState { lambda: prev.clone(), lambda_tilde: tilde },
        beta: 0.0,
        halvings: cfg.guard_max_halvings,
        exhausted: true,
    })
}

/// Order in which nodes are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// One node at a time, each seeing the latest values.
    Sequential,
    /// All nodes from the same snapshot, committed together.
    Parallel,
    /// B nodes drawn uniformly without replacement, updated in index order.
    DoublyStochastic(usize),
}

#[derive(Debug, Clone)]
pub struct MeanFieldRun {
    pub state: Vec<NodeState>,
    pub trace: RunTrace,
    /// Natural parameters of every node after each iteration.
    pub history: Vec<Vec<NatParams>>,
    pub converged: bool,
}

/// E_q log p(x_a | x_pa(a)).
pub fn expected_log_factor(f: &Factor, state: &[NodeState]) -> Result<f64> {
    let gauss = |var: f64, sq: f64| -0.5 * (LN_2PI + var.ln()) - 0.5 * sq / var;
    Ok(match *f {
        Factor::GaussianPrior { node, mean, var } => {
            let (m, v) = gauss_moments(state, node)?;
            gauss(var, (m - mean).powi(2) + v)
        }
        Factor::GaussianObs { node, y, var } => {
            let (m, v) = gauss_moments(state, node)?;
            gauss(var, (y - m).powi(2) + v)
        }
        Factor::GaussianChain { parent, child, var } => {
            let (mp, vp) = gauss_moments(state, parent)?;
            let (mc, vc) = gauss_moments(state, child)?;
            gauss(var, (mc - mp).powi(2) + vp + vc)
        }
        Factor::GammaPrior { node, a, b } => {
            let mu = nat_to_mean(&state[node].lambda)?;
            a * b.ln() - ln_gamma(a) + (a - 1.0) * mu.values[1] - b * mu.values[0]
        }
        Factor::LogitObs { node, .. } | Factor::GammaShapeObs { node, .. } => {
            let nc = f.non_conjugate(node).expect("observation factors carry a likelihood");
            exact_expectation(&nc, &state[node].lambda)?
        }
    })
}

/// Negative ELBO of the mean-field q.
pub fn neg_elbo(net: &BayesNet, state: &[NodeState]) -> Result<f64> {
    let mut total = 0.0;
    for f in &net.factors {
        total -= expected_log_factor(f, state)?;
    }
    for s in state {
        total -= entropy(&s.lambda)?;
    }
    Ok(total)
}

fn check_state(net: &BayesNet, state: &[NodeState]) -> Result<()> {
    if state.len() != net.n_nodes() {
        return Err(CviError::DimensionMismatch { expected: net.n_nodes(), got: state.len() });
    }
    Ok(())
}

/// Runs Algorithm 2 from the net's initial parameters.
///
/// Iteration t visits every node once (sequential, parallel) or B sampled nodes.
/// `cfg.minibatch` is ignored; the schedule carries the batch size.
pub fn run_meanfield(net: &BayesNet, schedule: Schedule, cfg: &CviConfig) -> Result<MeanFieldRun> {
    cfg.validate()?;
    let m = net.n_nodes();
    if m == 0 {
        return Err(CviError::InvalidModel("network has no latent nodes".into()));
    }
    if let Schedule::DoublyStochastic(b) = schedule {
        if b == 0 || b > m {
            return Err(CviError::InvalidConfig(format!("node batch must lie in 1..={m}, got {b}")));
        }
    }
    let beta = cfg.schedule.beta();
    let clock = Clock::start(cfg.record_time);
    let mut state = net.initial_state();
    let mut trace = RunTrace::default();
    let mut history = Vec::new();
    let mut converged = false;
    for t in 1..=cfg.max_iters {
        let mut halvings = 0;
        let mut beta_eff = beta;
        let mut exhausted = false;
        let mut note = |u: &NodeUpdate| {
            halvings += u.halvings;
            beta_eff = beta_eff.min(u.beta);
            exhausted |= u.exhausted;
        };
        match schedule {
            Schedule::Sequential => {
                for i in 0..m {
                    let u = node_update(net, &state, i, beta, cfg, t).map_err(|e| e.at_iteration(t))?;
                    note(&u);
                    state[i] = u.state;
                }
            }
            Schedule::Parallel => {
                let snapshot = &state;
                let updates = try_map_range(cfg.parallelism, m, |i| node_update(net, snapshot, i, beta, cfg, t))
                    .map_err(|e| e.at_iteration(t))?;
                for u in &updates {
                    note(u);
                }
                state = updates.into_iter().map(|u| u.state).collect();
            }
            Schedule::DoublyStochastic(b) => {
                for i in minibatch_indices(cfg.seed, t, m, b) {
                    let u = node_update(net, &state, i, beta, cfg, t).map_err(|e| e.at_iteration(t))?;
                    note(&u);
                    state[i] = u.state;
                }
            }
        }
        let neg = if cfg.track_elbo { neg_elbo(net, &state).map_err(|e| e.at_iteration(t))? } else { f64::NAN };
        trace.push(TraceRow {
            iter: t,
            elapsed_ms: clock.elapsed_ms(),
            neg_elbo: neg,
            train_logloss: f64::NAN,
            test_logloss: f64::NAN,
            guard_halvings: halvings,
            beta_eff,
            guard_exhausted: exhausted,
        });
        history.push(state.iter().map(|s| s.lambda.clone()).collect());
        if let Some(tol) = cfg.tolerance {
            if stop_rule(&trace, tol) {
                converged = true;
                break;
            }
        }
    }
    Ok(MeanFieldRun { state, trace, history, converged })
}

/// grad_lambda E_q[f] for a scalar q, by quadrature.
fn nat_gradient_of_expectation(f: &dyn Fn(f64) -> f64, df: &dyn Fn(f64) -> (f64, f64), q: &NatParams) -> Result<Vec<f64>> {
    match q.family {
        FamilyKind::GaussianScalar => {
            // (dE/dm, dE/dv) from Bonnet and Price, then the chain rule through
            // m = -l1 / (2 l2), v = -1 / (2 l2)
            let (m, v) = q.gaussian_moments()?;
            let rule = gauss_hermite(GH_NODES);
            let s = v.sqrt();
            let (mut e1, mut e2) = (0.0, 0.0);
            for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                let (d1, d2) = df(m + s * x);
                e1 += w * d1;
                e2 += w * d2;
            }
            let (dm, dv) = (e1, 0.5 * e2);
            Ok(vec![dm * v, dm * 2.0 * m * v + dv * 2.0 * v * v])
        }
        FamilyKind::Gamma => {
            // score identity: grad_lambda E f = Cov(phi(z), f(z))
            let (a, b) = q.gamma_shape_rate()?;
            let nodes = gamma_nodes(a, b);
            let (mut ef, mut ez, mut el, mut ezf, mut elf) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(z, lz, w) in &nodes {
                let fz = f(z);
                ef += w * fz;
                ez += w * z;
                el += w * lz;
                ezf += w * z * fz;
                elf += w * lz * fz;
            }
            Ok(vec![ezf - ez * ef, elf - el * ef])
        }
        FamilyKind::GaussianFull(_) => Err(CviError::FamilyMismatch { expected: "scalar family".into(), got: q.family.to_string() }),
    }
}

/// One NC-VMP update of node `i`: sum over factors of C^-1 grad_lambda E_q log p(x_a | x_pa(a)).
///
/// Each factor is seen by node i as z -> <eta~_a, phi(z)> + log p_nc(z); the
/// lambda-gradient is taken by quadrature and the Fisher system solved directly.
pub fn ncvmp_step(net: &BayesNet, state: &[NodeState], i: usize) -> Result<NatParams> {
    check_state(net, state)?;
    if i >= net.n_nodes() {
        return Err(CviError::IndexOutOfRange { index: i, len: net.n_nodes() });
    }
    let q = &state[i].lambda;
    let fam = q.family;
    let mut grad = vec![0.0; 2];
    for &a in &net.neighbors[i] {
        let eta = conjugate_message(net, state, a, i)?;
        let nc = net.factors[a].non_conjugate(i);
        let f = |z: f64| {
            let phi = fam.suff_stats_scalar(z).unwrap_or([f64::NAN, f64::NAN]);
            eta[0] * phi[0] + eta[1] * phi[1] + nc.as_ref().map_or(0.0, |n| n.value(z))
        };
        // derivatives only feed the Gaussian branch, where phi = (z, z^2)
        let df = |z: f64| {
            let (n1, n2) = nc.as_ref().map_or((0.0, 0.0), |n| n.d1_d2(z));
            (eta[0] + 2.0 * eta[1] * z + n1, 2.0 * eta[1] + n2)
        };
        let g = nat_gradient_of_expectation(&f, &df, q)?;
        grad[0] += g[0];
        grad[1] += g[1];
    }
    let c = fisher_info(q)?;
    let sol = c
        .lu()
        .solve(&DVector::from_column_slice(&grad))
        .ok_or_else(|| CviError::out_of_domain("fisher information is singular"))?;
    NatParams::new(fam, sol.iter().copied().collect())
}

/// z_0 ~ N(0, 1), z_k ~ N(z_{k-1}, chain_var), y_k ~ N(z_k, obs_var) for k = 1..=T.
/// Nodes start at N(0, 1).
pub fn gaussian_chain_net(y: &[f64], chain_var: f64, obs_var: f64) -> Result<BayesNet> {
    let mut net = chain_skeleton(y.len(), chain_var)?;
    for (k, &v) in y.iter().enumerate() {
        net.add_factor(Factor::GaussianObs { node: k + 1, y: v, var: obs_var })?;
    }
    Ok(net)
}

/// The same chain with Bernoulli-logit observations.
pub fn logit_chain_net(y: &[f64], chain_var: f64) -> Result<BayesNet> {
    let mut net = chain_skeleton(y.len(), chain_var)?;
    for (k, &v) in y.iter().enumerate() {
        net.add_factor(Factor::LogitObs { node: k + 1, y: v })?;
    }
    Ok(net)
}

fn chain_skeleton(t: usize, chain_var: f64) -> Result<BayesNet> {
    let mut net = BayesNet::new();
    for _ in 0..=t {
        net.add_node(NatParams::gaussian(0.0, 1.0)?)?;
    }
    net.add_factor(Factor::GaussianPrior { node: 0, mean: 0.0, var: 1.0 })?;
    for k in 1..=t {
        net.add_factor(Factor::GaussianChain { parent: k - 1, child: k, var: chain_var })?;
    }
    Ok(net)
}

/// One Gamma node with prior Ga(a, b) and shape observations; starts at the prior.
pub fn gamma_shape_net(y: &[f64], a: f64, b: f64) -> Result<BayesNet> {
    let mut net = BayesNet::new();
    let z = net.add_node(NatParams::gamma(a, b)?)?;
    net.add_factor(Factor::GammaPrior { node: z, a, b })?;
    for &v in y {
        net.add_factor(Factor::GammaShapeObs { node: z, y: v })?;
    }
    Ok(net)
}

/// Scalar Gaussian node with prior N(0, delta) and logit observations; starts at the prior.
pub fn logit_node_net(y: &[f64], delta: f64) -> Result<BayesNet> {
    let mut net = BayesNet::new();
    let z = net.add_node(NatParams::gaussian(0.0, delta)?)?;
    net.add_factor(Factor::GaussianPrior { node: z, mean: 0.0, var: delta })?;
    for &v in y {
        net.add_factor(Factor::LogitObs { node: z, y: v })?;
    }
    Ok(net)
}
