//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{CviError, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Number of entries in the packed lower triangle of a d x d matrix.
pub fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Recovers d from a packed length, if it is triangular.
pub fn dim_from_packed(len: usize) -> Option<usize> {
    let d = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (packed_len(d) == len).then_some(d)
}

/// Index of (i, j), i >= j, in row-major packed lower storage.
#[inline]
pub fn packed_index(i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    i * (i + 1) / 2 + j
}

pub fn pack_lower(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(packed_len(d));
    for i in 0..d {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unpack_symmetric(p: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| p[packed_index(i, j)])
}

pub fn unpack_lower(p: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i >= j { p[packed_index(i, j)] } else { 0.0 })
}

/// Cholesky factorisation without any repair. Fails if not numerically positive definite.
pub fn cholesky_strict(m: DMatrix<f64>) -> Option<Chol> {
    Cholesky::new(m)
}

/// Cholesky factorisation that retries once with `1e-10 * mean(diag)` added to the diagonal.
pub fn cholesky_jitter(m: DMatrix<f64>, what: &str) -> Result<Chol> {
    let n = m.nrows();
    let mean_diag = if n == 0 { 0.0 } else { m.diagonal().sum() / n as f64 };
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    if mean_diag > 0.0 && mean_diag.is_finite() {
        let mut j = m;
        for i in 0..n {
            j[(i, i)] += 1e-10 * mean_diag;
        }
        if let Some(c) = Cholesky::new(j) {
            return Ok(c);
        }
    }
    Err(CviError::out_of_domain(format!("{what} is not positive definite")))
}

pub fn chol_logdet(c: &Chol) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Solves L x = b for lower-triangular L held by the factorisation.
pub fn chol_solve_lower(c: &Chol, b: &DVector<f64>) -> DVector<f64> {
    let l = c.l();
    l.solve_lower_triangular(b).expect("cholesky factor has positive diagonal")
}

/// Squared Euclidean norm of L^{-1} b.
pub fn chol_quad(c: &Chol, b: &DVector<f64>) -> f64 {
    chol_solve_lower(c, b).norm_squared()
}

/// Trace of the inverse of the factored matrix.
pub fn chol_trace_inverse(c: &Chol) -> f64 {
    let n = c.l_dirty().nrows();
    let linv = c
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor has positive diagonal");
    linv.iter().map(|x| x * x).sum()
}

/// Log-determinant of a symmetric positive-definite 2x2 or general matrix via Cholesky.
pub fn spd_logdet(m: &DMatrix<f64>) -> Option<f64> {
    cholesky_strict(m.clone()).map(|c| chol_logdet(&c))
}
