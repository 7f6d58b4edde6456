//! Line-oriented `key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Cvi,
    CviExact,
    CviDs,
    MeanField,
    Sgd,
    Adam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cvi => "cvi",
            Method::CviExact => "cvi-exact",
            Method::CviDs => "cvi-ds",
            Method::MeanField => "meanfield",
            Method::Sgd => "sgd",
            Method::Adam => "adam",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cvi" => Method::Cvi,
            "cvi-exact" => Method::CviExact,
            "cvi-ds" => Method::CviDs,
            "meanfield" => Method::MeanField,
            "sgd" => Method::Sgd,
            "adam" => Method::Adam,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Bayesian logistic regression
    Blr,
    /// GP classification, logit link
    Gpc,
    /// random-walk chain with logit observations, one per row in file order
    Kalman,
    /// scalar Gamma shape model, labels are the observations
    Gamma,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Blr => "blr",
            ModelKind::Gpc => "gpc",
            ModelKind::Kalman => "kalman",
            ModelKind::Gamma => "gamma",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "blr" => ModelKind::Blr,
            "gpc" => ModelKind::Gpc,
            "kalman" => ModelKind::Kalman,
            "gamma" => ModelKind::Gamma,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestSplit {
    Fraction(f64),
    Count(usize),
}

impl TestSplit {
    pub fn count(self, n: usize) -> usize {
        match self {
            TestSplit::Fraction(f) => (f * n as f64).round() as usize,
            TestSplit::Count(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub method: Method,
    pub model: ModelKind,
    pub data_path: String,
    pub test_split: TestSplit,
    pub standardize: bool,
    pub delta: f64,
    pub sigma2: f64,
    pub a: f64,
    pub b: f64,
    pub log_sigma_f: f64,
    pub log_l: f64,
    pub step_w: Option<f64>,
    pub step_beta: Option<f64>,
    pub mc_samples: usize,
    pub minibatch: Option<usize>,
    pub max_iters: usize,
    pub seed: u64,
    pub out_path: Option<String>,
}

const KEYS: &[&str] = &[
    "method", "model", "data_path", "test_split", "standardize", "delta", "sigma2", "a", "b", "log_sigma_f", "log_l", "step_w",
    "step_beta", "mc_samples", "minibatch", "max_iters", "seed", "out_path",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}")))
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(HarnessError::Config(format!("{key} must be positive and finite, got {v}")))
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value", ln + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(HarnessError::Config(format!("line {}: unknown key {k:?}", ln + 1)));
            }
            if kv.insert(k, v).is_some() {
                return Err(HarnessError::Config(format!("line {}: repeated key {k:?}", ln + 1)));
            }
        }
        let get = |k: &str| kv.get(k).copied();
        let method = match get("method") {
            Some(m) => Method::parse(m).ok_or_else(|| HarnessError::Config(format!("unknown method {m:?}")))?,
            None => Method::Cvi,
        };
        let model = match get("model") {
            Some(m) => ModelKind::parse(m).ok_or_else(|| HarnessError::Config(format!("unknown model {m:?}")))?,
            None => ModelKind::Blr,
        };
        let data_path = get("data_path").ok_or_else(|| HarnessError::Config("data_path is required".into()))?.to_string();
        let test_split = match get("test_split") {
            None => TestSplit::Count(0),
            Some(v) if !v.contains(['.', 'e', 'E']) => TestSplit::Count(num("test_split", v)?),
            Some(v) => {
                let f: f64 = num("test_split", v)?;
                if !(0.0..1.0).contains(&f) {
                    return Err(HarnessError::Config(format!("test_split fraction must be in [0, 1), got {f}")));
                }
                TestSplit::Fraction(f)
            }
        };
        let standardize = match get("standardize") {
            None | Some("false") | Some("0") => false,
            Some("true") | Some("1") => true,
            Some(v) => return Err(HarnessError::Config(format!("standardize: expected true/false, got {v:?}"))),
        };
        let pos_or = |k: &str, d: f64| -> Result<f64> { get(k).map_or(Ok(d), |v| positive(k, num(k, v)?)) };
        let finite_or = |k: &str, d: f64| -> Result<f64> {
            match get(k) {
                None => Ok(d),
                Some(v) => {
                    let x: f64 = num(k, v)?;
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(HarnessError::Config(format!("{k} must be finite")))
                    }
                }
            }
        };
        let step_w = get("step_w").map(|v| positive("step_w", num("step_w", v)?)).transpose()?;
        let step_beta = get("step_beta").map(|v| positive("step_beta", num("step_beta", v)?)).transpose()?;
        if step_w.is_some() && step_beta.is_some() {
            return Err(HarnessError::Config("give at most one of step_w and step_beta".into()));
        }
        let count_or = |k: &str, d: usize| -> Result<usize> {
            let c = get(k).map_or(Ok(d), |v| num(k, v))?;
            if c == 0 {
                return Err(HarnessError::Config(format!("{k} must be at least 1")));
            }
            Ok(c)
        };
        let minibatch = get("minibatch").map(|v| num::<usize>("minibatch", v)).transpose()?;
        if minibatch == Some(0) {
            return Err(HarnessError::Config("minibatch must be at least 1".into()));
        }
        let cfg = Config {
            method,
            model,
            data_path,
            test_split,
            standardize,
            delta: pos_or("delta", 1.0)?,
            sigma2: pos_or("sigma2", 1.0)?,
            a: pos_or("a", 1.0)?,
            b: pos_or("b", 1.0)?,
            log_sigma_f: finite_or("log_sigma_f", 0.0)?,
            log_l: finite_or("log_l", 0.0)?,
            step_w,
            step_beta,
            mc_samples: count_or("mc_samples", 10)?,
            minibatch,
            max_iters: count_or("max_iters", 100)?,
            seed: get("seed").map_or(Ok(0), |v| num("seed", v))?,
            out_path: get("out_path").map(str::to_string),
        };
        cfg.check_combination()?;
        Ok(cfg)
    }

    pub fn from_file(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{path}: {e}")))?;
        Config::parse(&text)
    }

    fn check_combination(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        match self.method {
            Method::CviDs if self.minibatch.is_none() => return bad("method cvi-ds needs minibatch".into()),
            Method::MeanField if !matches!(self.model, ModelKind::Kalman | ModelKind::Gamma) => {
                return bad(format!("method meanfield supports models kalman and gamma, not {}", self.model.name()))
            }
            Method::Sgd | Method::Adam if self.step_w.is_some() => {
                return bad(format!("method {} takes its step size from step_beta", self.method.name()))
            }
            _ => {}
        }
        if self.minibatch.is_some() && self.method != Method::CviDs {
            return bad("minibatch only applies to method cvi-ds".into());
        }
        if let Some(b) = self.step_beta {
            if matches!(self.method, Method::Cvi | Method::CviExact | Method::CviDs | Method::MeanField) && b > 1.0 {
                return bad(format!("step_beta must be in (0, 1], got {b}"));
            }
        }
        if matches!(self.model, ModelKind::Kalman | ModelKind::Gamma) && self.test_split.count(1000) != 0 {
            return bad(format!("model {} uses every row; test_split must be 0", self.model.name()));
        }
        Ok(())
    }

    /// CVI step size: step_beta, w/(1+w) from step_w, or w = 0.4 by default.
    pub fn cvi_beta(&self) -> f64 {
        match (self.step_beta, self.step_w) {
            (Some(b), _) => b,
            (None, Some(w)) => w / (1.0 + w),
            (None, None) => 0.4 / 1.4,
        }
    }

    /// SGD rho (default 0.01) or ADAM w0 (default 0.5).
    pub fn baseline_step(&self) -> f64 {
        self.step_beta.unwrap_or(if self.method == Method::Adam { 0.5 } else { 0.01 })
    }
}
