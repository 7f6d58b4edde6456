//! Per-iteration run records.

/// One iteration of an optimiser.
///
/// Equality compares floats bitwise, so NaN entries compare equal to themselves.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub elapsed_ms: f64,
    pub neg_elbo: f64,
    pub train_logloss: f64,
    pub test_logloss: f64,
    /// Number of step halvings the constraint guard applied.
    pub guard_halvings: usize,
    /// Step size actually taken (0 when the guard gave up).
    pub beta_eff: f64,
    pub guard_exhausted: bool,
}

impl PartialEq for TraceRow {
    fn eq(&self, o: &Self) -> bool {
        self.iter == o.iter
            && self.elapsed_ms.to_bits() == o.elapsed_ms.to_bits()
            && self.neg_elbo.to_bits() == o.neg_elbo.to_bits()
            && self.train_logloss.to_bits() == o.train_logloss.to_bits()
            && self.test_logloss.to_bits() == o.test_logloss.to_bits()
            && self.guard_halvings == o.guard_halvings
            && self.beta_eff.to_bits() == o.beta_eff.to_bits()
            && self.guard_exhausted == o.guard_exhausted
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    pub fn push(&mut self, row: TraceRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.iter < row.iter));
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// First iteration whose negative ELBO is at or below `level`.
    pub fn first_reaching(&self, level: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.neg_elbo <= level).map(|r| r.iter)
    }
}

/// Wall clock for traces. A frozen clock always reports zero so traces are byte-reproducible.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    start: Option<std::time::Instant>,
}

impl Clock {
    pub fn start(record: bool) -> Self {
        Clock { start: record.then(std::time::Instant::now) }
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3)
    }
}
