//! Log-correlated Gaussian fields on the unit box.
//!
//! Exact covariance kernels, samplers, Monte Carlo estimators for the law of
//! the recentered maximum, and numerical certificates for the comparison
//! inequalities that relate a general log-correlated field to the modified
//! branching random walk.

pub mod comparison;
pub mod error;
pub mod extremes;
pub mod golden;
pub mod green;
pub mod kernels;
pub mod lattice;
pub mod linalg;
pub mod quad;
pub mod rng;
pub mod samplers;
pub mod special;

pub use error::{Error, Result};
pub use kernels::{kernel_matrix, m_eps, KernelSpec, RecenteringConstant};
pub use lattice::{Lattice, PointSet};
pub use linalg::{CholeskyFactor, CovMatrix};
pub use rng::SeedSpec;
pub use samplers::{FieldSample, Method, Sampler};
