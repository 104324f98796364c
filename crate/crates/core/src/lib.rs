//! Monte Carlo toolkit for polaron path measures.
//!
//! The path measure of a polaron is a Brownian motion reweighted by a pair
//! potential. Expanding the exponential turns it into a Poisson process of
//! interaction intervals, and the intervals group into the busy cycles of an
//! M/G/∞ queue. Everything here is built on that picture:
//!
//! - [`potentials`]: pair potentials `w = g·v` and their Bernstein mixtures.
//! - [`cluster`]: busy cycles, Poisson configurations, restriction.
//! - [`gaussian`]: Brownian linear algebra over cluster intervals, `F(ξ)`
//!   estimators and samplers of the cluster-conditioned path law.
//! - [`renewal`]: renewal equation solver and stationary alternating windows.
//! - [`tilting`]: the tilting equation, free energy and tilted cycle law.
//! - [`stationary`]: the CLT covariance and the functional CLT test suite.
//! - [`diagnostics`]: growth-condition scans and bound suites.
//!
//! All randomness flows through explicit RNG arguments or [`rng::SeedStreams`];
//! nothing here spawns threads. Callers that want parallelism supply an
//! [`exec::Executor`].

pub mod cluster;
pub mod diagnostics;
pub mod error;
pub mod estimate;
pub mod exec;
pub mod gaussian;
pub mod potentials;
pub mod renewal;
pub mod rng;
pub mod stationary;
pub mod stats;
pub mod tilting;

pub use error::{Error, Result};
pub use estimate::Estimate;
