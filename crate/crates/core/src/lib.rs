//! Learned solver for ill-conditioned linear systems.
//!
//! The crate covers the full pipeline: spectral boundary-value-problem
//! datasets ([`bvp`], [`chebyshev`]), classical reference solvers
//! ([`linalg`]), a reverse-mode autodiff engine ([`autodiff`]), the
//! column-patch transformer ([`model`]) with its training loop
//! ([`training`]), and Newton's method for ℓp regression with a pluggable
//! direction provider ([`newton`]).

pub mod autodiff;
pub mod binio;
pub mod bvp;
pub mod chebyshev;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod newton;
pub mod seeding;
pub mod stats;
pub mod training;

pub use linalg::{DenseMatrix, Vector};
