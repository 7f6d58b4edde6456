//! Builds a model from a config, runs the chosen method and collects metrics.

use std::path::Path;

use cvi::baselines::{run_baseline, AdamHyper, BaselineConfig, BaselineModel, FlatParams, Optimizer};
use cvi::conjugate::{ConjugateModelSpec, Posterior};
use cvi::cvi::{run_cvi, run_cvi_doubly_stochastic, CviConfig, StepSchedule};
use cvi::gradients::GradMode;
use cvi::meanfield::{gamma_shape_net, logit_chain_net, run_meanfield, Schedule};
use cvi::models::{build_blr, build_gamma_shape, build_gpc, build_kalman_glm, with_bias, CviModel, KernelSpec, Likelihood};
use cvi::par::Parallelism;
use cvi::rng::{substream, Stream};
use cvi::trace::RunTrace;
use cvi::CviError;
use nalgebra::{DMatrix, DVector};

use crate::config::{Config, Method, ModelKind};
use crate::data::{read_libsvm, Dataset};
use crate::metrics::{mean_log_loss, predictive_prob, METRIC_SAMPLES};
use crate::output::{trace_csv, Summary};
use crate::{HarnessError, Result};

/// Iterations at which log-loss is evaluated: 1, 2, 3, 5, 8, 10, then every 10th and the last.
pub fn is_marker(t: usize, max_iters: usize) -> bool {
    matches!(t, 1 | 2 | 3 | 5 | 8 | 10) || t % 10 == 0 || t == max_iters
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Report elapsed_ms = 0 everywhere so traces are byte-reproducible.
    pub frozen_clock: bool,
}

impl RunOptions {
    /// Frozen when `CVI_FROZEN_CLOCK` is set to anything but "" or "0".
    pub fn from_env() -> Self {
        let frozen = std::env::var("CVI_FROZEN_CLOCK").is_ok_and(|v| !v.is_empty() && v != "0");
        RunOptions { frozen_clock: frozen }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub trace: RunTrace,
    pub summary: Summary,
}

fn compute_err(e: CviError) -> HarnessError {
    match e {
        CviError::InvalidConfig(m) => HarnessError::Config(m),
        e => HarnessError::Numeric(e),
    }
}

fn data_err(e: CviError) -> HarnessError {
    HarnessError::Data(e.to_string())
}

/// What the metric evaluator needs to turn a q into per-point (mean, variance) of the linear predictor.
enum Readout {
    /// rows of the bias-augmented design, train then test
    Linear { train: DMatrix<f64>, test: DMatrix<f64> },
    Gp { spec_kernel: KernelSpec, xs_train: Vec<Vec<f64>>, xs_test: Vec<Vec<f64>>, k_inv: DMatrix<f64> },
    /// chain positions 1..=T
    Chain { t: usize },
    None,
}

struct Problem {
    model: CviModel,
    readout: Readout,
    y_train: Vec<f64>,
    y_test: Vec<f64>,
    /// raw observations for the mean-field nets
    obs: Vec<f64>,
}

fn build_problem(cfg: &Config, data: &Dataset) -> Result<Problem> {
    match cfg.model {
        ModelKind::Blr => {
            let y_all = data.binary_labels()?;
            let (xtr, xte) = (data.rows(&data.train), data.rows(&data.test));
            let y_train: Vec<f64> = data.train.iter().map(|&i| y_all[i]).collect();
            let y_test: Vec<f64> = data.test.iter().map(|&i| y_all[i]).collect();
            let model = build_blr(&xtr, &y_train, cfg.delta).map_err(data_err)?;
            let readout = Readout::Linear { train: with_bias(&xtr), test: with_bias(&xte) };
            Ok(Problem { model, readout, y_train, y_test, obs: Vec::new() })
        }
        ModelKind::Gpc => {
            let y_all = data.binary_labels()?;
            let to_vecs = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| data.x.row(i).iter().copied().collect()).collect() };
            let (xs_train, xs_test) = (to_vecs(&data.train), to_vecs(&data.test));
            let y_train: Vec<f64> = data.train.iter().map(|&i| y_all[i]).collect();
            let y_test: Vec<f64> = data.test.iter().map(|&i| y_all[i]).collect();
            let kernel = KernelSpec::new(cfg.log_sigma_f, cfg.log_l).map_err(|e| HarnessError::Config(e.to_string()))?;
            let model = build_gpc(&xs_train, &y_train, kernel, Likelihood::BernoulliLogit).map_err(data_err)?;
            let k_inv = match &model.spec {
                ConjugateModelSpec::Gp(s) => s.chol().inverse(),
                _ => unreachable!("gpc builds a GP"),
            };
            Ok(Problem { model, readout: Readout::Gp { spec_kernel: kernel, xs_train, xs_test, k_inv }, y_train, y_test, obs: Vec::new() })
        }
        ModelKind::Kalman => {
            let y = data.binary_labels()?;
            let model = build_kalman_glm(&y, cfg.sigma2).map_err(data_err)?;
            Ok(Problem { model, readout: Readout::Chain { t: y.len() }, y_train: y.clone(), y_test: Vec::new(), obs: y })
        }
        ModelKind::Gamma => {
            let y = data.y.clone();
            let model = build_gamma_shape(&y, cfg.a, cfg.b).map_err(data_err)?;
            Ok(Problem { model, readout: Readout::None, y_train: Vec::new(), y_test: Vec::new(), obs: y })
        }
    }
}

/// Scores (mean, var) lists for train and test points.
fn score(train: &[(f64, f64)], test: &[(f64, f64)], p: &Problem, seed: u64, t: usize) -> cvi::Result<(f64, f64)> {
    let probs = |pts: &[(f64, f64)], offset: usize| -> cvi::Result<Vec<f64>> {
        pts.iter()
            .enumerate()
            .map(|(n, &(m, v))| {
                let mut rng = substream(seed, Stream::Metrics, t as u64, (offset + n) as u64);
                predictive_prob(m, v.max(0.0), Likelihood::BernoulliLogit, METRIC_SAMPLES, &mut rng)
            })
            .collect()
    };
    let ptr = probs(train, 0)?;
    let pte = probs(test, train.len())?;
    Ok((mean_log_loss(&ptr, &p.y_train), mean_log_loss(&pte, &p.y_test)))
}

fn eval_posterior(p: &Problem, post: &Posterior, seed: u64, t: usize) -> cvi::Result<(f64, f64)> {
    let (train, test): (Vec<(f64, f64)>, Vec<(f64, f64)>) = match (&p.readout, post) {
        (Readout::Linear { train, test }, Posterior::LinReg(q)) => {
            let proj = |x: &DMatrix<f64>| (0..x.nrows()).map(|n| q.project(&x.row(n).transpose())).collect::<Vec<_>>();
            (proj(train), proj(test))
        }
        (Readout::Gp { spec_kernel, xs_train, xs_test, .. }, Posterior::Gp(q)) => {
            let ConjugateModelSpec::Gp(spec) = &p.model.spec else { unreachable!() };
            let train = (0..xs_train.len()).map(|i| q.marginal(spec, i)).collect();
            let test = xs_test.iter().map(|x| q.predict(spec, &spec_kernel.cross(xs_train, x), spec_kernel.variance())).collect();
            (train, test)
        }
        (Readout::Chain { t: horizon }, post) => {
            let train = (1..=*horizon)
                .map(|k| post.marginal(&p.model.spec, k).and_then(|q| q.gaussian_moments()))
                .collect::<cvi::Result<Vec<_>>>()?;
            (train, Vec::new())
        }
        _ => return Ok((f64::NAN, f64::NAN)),
    };
    score(&train, &test, p, seed, t)
}

fn eval_params(p: &Problem, params: &FlatParams, seed: u64, t: usize) -> cvi::Result<(f64, f64)> {
    if matches!(p.readout, Readout::None) {
        return Ok((f64::NAN, f64::NAN));
    }
    let (m, l) = params.gaussian_factors()?;
    let lin = |x: &DVector<f64>| (x.dot(&m), (l.transpose() * x).norm_squared());
    let (train, test): (Vec<(f64, f64)>, Vec<(f64, f64)>) = match &p.readout {
        Readout::Linear { train, test } => {
            let proj = |x: &DMatrix<f64>| (0..x.nrows()).map(|n| lin(&x.row(n).transpose())).collect::<Vec<_>>();
            (proj(train), proj(test))
        }
        Readout::Gp { spec_kernel, xs_train, xs_test, k_inv } => {
            let train = (0..m.len()).map(|i| (m[i], l.row(i).norm_squared())).collect();
            let alpha = k_inv * &m;
            let test = xs_test
                .iter()
                .map(|x| {
                    let ks = spec_kernel.cross(xs_train, x);
                    let a = k_inv * &ks;
                    let la = l.transpose() * &a;
                    (ks.dot(&alpha), spec_kernel.variance() - ks.dot(&a) + la.norm_squared())
                })
                .collect();
            (train, test)
        }
        Readout::Chain { t: horizon } => ((1..=*horizon).map(|k| (m[k], l.row(k).norm_squared())).collect(), Vec::new()),
        Readout::None => unreachable!(),
    };
    score(&train, &test, p, seed, t)
}

fn cvi_config(cfg: &Config, opts: RunOptions) -> CviConfig {
    CviConfig {
        schedule: StepSchedule::Constant(cfg.cvi_beta()),
        grad_mode: if cfg.method == Method::CviExact { GradMode::Exact } else { GradMode::MonteCarlo { samples: cfg.mc_samples } },
        max_iters: cfg.max_iters,
        minibatch: cfg.minibatch,
        seed: cfg.seed,
        tolerance: None,
        parallelism: Parallelism::default(),
        record_time: !opts.frozen_clock,
        track_elbo: true,
        ..CviConfig::default()
    }
}

/// Loads the data, runs the configured method and, if `out_path` is set, writes
/// `trace.csv` and `summary.txt` into that directory.
pub fn run_experiment(cfg: &Config, opts: RunOptions) -> Result<Outcome> {
    let mut data = read_libsvm(&cfg.data_path)?;
    let n_test = cfg.test_split.count(data.n_rows());
    data.split(n_test, cfg.seed)?;
    if cfg.standardize {
        data.standardize();
    }
    if let Some(dir) = &cfg.out_path {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Data(format!("{dir}: {e}")))?;
    }
    let problem = build_problem(cfg, &data)?;
    let mut summary = Summary::default();
    summary.set("method", cfg.method.name());
    summary.set("model", cfg.model.name());
    summary.set("seed", cfg.seed);
    summary.set("n_train", data.train.len());
    summary.set("n_test", data.test.len());
    summary.set("n_features", data.n_features());
    let (seed, max_iters) = (cfg.seed, cfg.max_iters);

    let (trace, converged) = match cfg.method {
        Method::Cvi | Method::CviExact | Method::CviDs => {
            let ccfg = cvi_config(cfg, opts);
            let mut hook = |t: usize, post: &Posterior| {
                if is_marker(t, max_iters) {
                    eval_posterior(&problem, post, seed, t)
                } else {
                    Ok((f64::NAN, f64::NAN))
                }
            };
            let run = if cfg.method == Method::CviDs {
                run_cvi_doubly_stochastic(&problem.model, &ccfg, Some(&mut hook))
            } else {
                run_cvi(&problem.model, &ccfg, Some(&mut hook))
            }
            .map_err(compute_err)?;
            match &run.posterior {
                Posterior::LinReg(q) => summary.set("dual_path", q.is_dual()),
                Posterior::Gamma(q) => {
                    let (a, b) = q.gamma_shape_rate()?;
                    summary.setf("posterior_mean", a / b);
                }
                _ => {}
            }
            (run.trace, run.converged)
        }
        Method::MeanField => {
            let net = match cfg.model {
                ModelKind::Kalman => logit_chain_net(&problem.obs, cfg.sigma2),
                ModelKind::Gamma => gamma_shape_net(&problem.obs, cfg.a, cfg.b),
                _ => unreachable!("rejected by config validation"),
            }
            .map_err(data_err)?;
            let mut run = run_meanfield(&net, Schedule::Sequential, &cvi_config(cfg, opts)).map_err(compute_err)?;
            if let Readout::Chain { t: horizon } = problem.readout {
                for (row, nodes) in run.trace.rows.iter_mut().zip(&run.history) {
                    if is_marker(row.iter, max_iters) {
                        let pts = (1..=horizon).map(|k| nodes[k].gaussian_moments()).collect::<cvi::Result<Vec<_>>>()?;
                        let (tr, te) = score(&pts, &[], &problem, seed, row.iter)?;
                        row.train_logloss = tr;
                        row.test_logloss = te;
                    }
                }
            } else if let Some(last) = run.history.last() {
                let (a, b) = last[0].gamma_shape_rate()?;
                summary.setf("posterior_mean", a / b);
            }
            (run.trace, run.converged)
        }
        Method::Sgd | Method::Adam => {
            let base = BaselineModel::from_model(&problem.model)?;
            let step = cfg.baseline_step();
            let bcfg = BaselineConfig {
                optimizer: if cfg.method == Method::Sgd { Optimizer::Sgd { rho: step } } else { Optimizer::Adam(AdamHyper::new(step)) },
                grad_mode: GradMode::MonteCarlo { samples: cfg.mc_samples },
                max_iters: cfg.max_iters,
                seed: cfg.seed,
                record_time: !opts.frozen_clock,
                track_elbo: true,
            };
            let mut hook = |t: usize, params: &FlatParams| {
                if is_marker(t, max_iters) {
                    eval_params(&problem, params, seed, t)
                } else {
                    Ok((f64::NAN, f64::NAN))
                }
            };
            let run = run_baseline(&base, &bcfg, Some(&mut hook)).map_err(compute_err)?;
            if let Ok((a, b)) = run.params.gamma_shape_rate() {
                summary.setf("posterior_mean", a / b);
            }
            (run.trace, false)
        }
    };

    let last_of = |f: fn(&cvi::trace::TraceRow) -> f64| trace.rows.iter().rev().map(f).find(|v| !v.is_nan()).unwrap_or(f64::NAN);
    summary.set("iterations", trace.len());
    summary.set("converged", converged);
    summary.setf("neg_elbo", last_of(|r| r.neg_elbo));
    summary.setf("train_logloss", last_of(|r| r.train_logloss));
    summary.setf("test_logloss", last_of(|r| r.test_logloss));
    summary.set("guard_halvings", trace.rows.iter().map(|r| r.guard_halvings).sum::<usize>());
    summary.set("elapsed_ms", format!("{:.3}", trace.last().map_or(0.0, |r| r.elapsed_ms)));

    if let Some(dir) = &cfg.out_path {
        let write = |name: &str, body: String| {
            let p = Path::new(dir).join(name);
            std::fs::write(&p, body).map_err(|e| HarnessError::Data(format!("{}: {e}", p.display())))
        };
        write("trace.csv", trace_csv(&trace))?;
        write("summary.txt", summary.render())?;
    }
    Ok(Outcome { trace, summary })
}
