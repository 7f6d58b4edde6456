//! Trace CSV and summary serialization.

use std::fmt::Write as _;

use cvi::trace::RunTrace;

pub const TRACE_HEADER: &str = "iter,elapsed_ms,neg_elbo,train_logloss,test_logloss,guard_halvings";

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

pub fn trace_csv(trace: &RunTrace) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        writeln!(
            out,
            "{},{:.3},{},{},{},{}",
            r.iter,
            r.elapsed_ms,
            fmt_f(r.neg_elbo),
            fmt_f(r.train_logloss),
            fmt_f(r.test_logloss),
            r.guard_halvings
        )
        .unwrap();
    }
    out
}

/// Ordered key=value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|e| e.0 == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn setf(&mut self, key: &str, v: f64) {
        self.set(key, fmt_f(v));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.0 == key).map(|e| e.1.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Summary {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Summary { entries }
    }
}

/// Fixed-width table of selected summary keys, one row per summary.
pub fn compare_table(names: &[String], summaries: &[Summary]) -> String {
    const COLS: &[&str] = &["method", "model", "iterations", "neg_elbo", "train_logloss", "test_logloss", "guard_halvings", "elapsed_ms"];
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("config").chain(COLS.iter().copied()).map(str::to_string).collect()];
    for (n, s) in names.iter().zip(summaries) {
        let mut row = vec![n.clone()];
        row.extend(COLS.iter().map(|c| s.get(c).unwrap_or("-").to_string()));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
