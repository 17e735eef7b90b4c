//! Norm-game peer effects: aggregators, equilibria, influence geometry, and IV/GMM.
//!
//! The library models peer influence through a scalar exposure index
//! `N_i = Φ_i(a_{-i}; G, θ)` where `Φ` is one of four aggregator families
//! (linear-in-means, CES/power mean, smooth-max, weighted quantile). From the
//! maintained aggregator it derives the objects used for identification:
//!
//! - the marginal-influence Jacobian and the row-normalized transport operator
//!   `P(θ; ŷ)` evaluated at an exogenous predictor,
//! - geometry-induced instruments: multi-step propagation `P^k X`,
//!   effective-distance shells, and torsion-weighted two-step exposures,
//! - one-step scalar instruments (predicted peer norm and its θ-derivative),
//! - 2SLS/GMM estimation with cluster-robust inference, first-stage
//!   diagnostics, and a profile search over the preference parameter,
//! - a seeded Monte Carlo harness on dispersion-bridge networks.
//!
//! Group-level computations (transport, distances, menus) and Monte Carlo
//! replications are data-parallel via rayon when the `parallel` feature is
//! enabled (default); the sequential fallback produces identical results.

pub mod aggregators;
pub mod equilibrium;
pub mod error;
pub mod estimate;
pub mod geometry;
pub mod montecarlo;
pub mod netcore;
pub mod par;
pub mod predictor;
mod rng;

pub use error::{Error, Result};
