//! Conjugate-computation variational inference.
//!
//! Models are split into a conjugate part, handled by exact Bayesian updates,
//! and non-conjugate factors, linearised in the mean-parameter space of the
//! variational family. Each iteration is a mirror-descent step that reduces to
//! a conjugate update with per-factor pseudo-observations ("sites").

pub mod baselines;
pub mod battery;
pub mod conjugate;
pub mod cvi;
pub mod error;
pub mod expfam;
pub mod gradients;
pub mod linalg;
pub mod meanfield;
pub mod models;
pub mod par;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod trace;

pub use error::{CviError, Result};
