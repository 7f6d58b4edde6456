//! libsvm text ingestion and train/test splitting.

use std::fmt::Write as _;
use std::path::Path;

use cvi::rng::{substream, Stream};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::{HarnessError, Result};

/// One parsed libsvm line: label and sorted (0-based column, value) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub label: f64,
    pub entries: Vec<(usize, f64)>,
}

/// Parses libsvm text. `origin` names the source in error messages.
pub fn parse_libsvm(text: &str, origin: &str) -> Result<Vec<SparseRow>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| HarnessError::Data(format!("{origin}:{}: {msg}", ln + 1));
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok.parse().map_err(|_| err(format!("bad label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(err(format!("bad label {label_tok:?}")));
        }
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| err(format!("expected idx:val, got {tok:?}")))?;
            let i: usize = i.parse().map_err(|_| err(format!("bad index {i:?}")))?;
            if i == 0 {
                return Err(err("indices are 1-based".into()));
            }
            let v: f64 = v.parse().map_err(|_| err(format!("bad value {v:?}")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value at index {i}")));
            }
            entries.push((i - 1, v));
        }
        entries.sort_by_key(|e| e.0);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(err(format!("duplicate index {}", w[0].0 + 1)));
        }
        rows.push(SparseRow { label, entries });
    }
    Ok(rows)
}

/// Writes rows in libsvm format, skipping zero entries.
pub fn write_libsvm(rows: &[SparseRow]) -> String {
    let mut out = String::new();
    for r in rows {
        write!(out, "{}", r.label).unwrap();
        for &(i, v) in &r.entries {
            if v != 0.0 {
                write!(out, " {}:{}", i + 1, v).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

/// Feature matrix with labels and a train/test partition of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    /// Labels as read; -1/+1 already mapped to 0/1.
    pub y: Vec<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub standardized: bool,
}

impl Dataset {
    /// Dense dataset from sparse rows; every row is in the training set.
    pub fn from_rows(rows: &[SparseRow]) -> Self {
        let d = rows.iter().filter_map(|r| r.entries.last().map(|e| e.0 + 1)).max().unwrap_or(0);
        let mut x = DMatrix::zeros(rows.len(), d);
        for (n, r) in rows.iter().enumerate() {
            for &(i, v) in &r.entries {
                x[(n, i)] = v;
            }
        }
        let y = rows.iter().map(|r| if r.label == -1.0 { 0.0 } else { r.label }).collect();
        Dataset { x, y, train: (0..rows.len()).collect(), test: Vec::new(), standardized: false }
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Labels in {0, 1}. Any other pair of distinct labels (breast-cancer uses 2/4) maps lower to 0.
    pub fn binary_labels(&self) -> Result<Vec<f64>> {
        let Some(v) = self.y.iter().copied().find(|&v| v != 0.0 && v != 1.0) else {
            return Ok(self.y.clone());
        };
        let lo = self.y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo < hi && self.y.iter().all(|&y| y == lo || y == hi) {
            Ok(self.y.iter().map(|&y| if y == hi { 1.0 } else { 0.0 }).collect())
        } else {
            Err(HarnessError::Data(format!("label {v} is not binary (expected two distinct labels)")))
        }
    }

    pub fn rows(&self, idx: &[usize]) -> DMatrix<f64> {
        self.x.select_rows(idx)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.y[i]).collect()
    }

    /// Shuffles rows with the data-shuffle stream and holds out `n_test` of them.
    pub fn split(&mut self, n_test: usize, seed: u64) -> Result<()> {
        let n = self.n_rows();
        if n_test >= n && n > 0 {
            return Err(HarnessError::Config(format!("test split of {n_test} leaves no training rows out of {n}")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        if n_test > 0 {
            perm.shuffle(&mut substream(seed, Stream::DataShuffle, 0, 0));
        }
        self.test = perm[..n_test].to_vec();
        self.test.sort_unstable();
        self.train = perm[n_test..].to_vec();
        self.train.sort_unstable();
        Ok(())
    }

    /// Z-scores every column with training-set statistics; constant columns are left alone.
    pub fn standardize(&mut self) {
        let nt = self.train.len() as f64;
        if nt < 2.0 {
            return;
        }
        for j in 0..self.n_features() {
            let mean = self.train.iter().map(|&i| self.x[(i, j)]).sum::<f64>() / nt;
            let var = self.train.iter().map(|&i| (self.x[(i, j)] - mean).powi(2)).sum::<f64>() / (nt - 1.0);
            if var > 0.0 {
                let sd = var.sqrt();
                self.x.column_mut(j).apply(|v| *v = (*v - mean) / sd);
            }
        }
        self.standardized = true;
    }
}

/// Reads one libsvm file, or several separated by commas, concatenated in order.
pub fn read_libsvm(path: &str) -> Result<Dataset> {
    let mut rows = Vec::new();
    for p in path.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let text = std::fs::read_to_string(Path::new(p)).map_err(|e| HarnessError::Data(format!("{p}: {e}")))?;
        rows.extend(parse_libsvm(&text, p)?);
    }
    if rows.is_empty() {
        return Err(HarnessError::Data(format!("{path}: no data rows")));
    }
    Ok(Dataset::from_rows(&rows))
}
