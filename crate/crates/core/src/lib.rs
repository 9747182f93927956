//! Numerical core for exclusion processes with Bernoulli invariant measures:
//! finite geometry, local functions, rate families, chaos calculus, exact
//! generators, heat kernels, jump-kernel design, cell problems and Monte Carlo.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod configspace;
pub mod error;
pub mod exactgen;
pub mod fock;
pub mod heatkernel;
pub mod homogenize;
pub mod lattice;
pub mod linalg;
pub mod mcsim;
pub mod rates;
pub mod walkdesign;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
