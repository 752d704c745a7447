//! Data-driven predictive safety filter for unknown, possibly input-delayed
//! LTI systems.
//!
//! The filter never sees a model. It is built from one recorded input-output
//! batch: the batch is reshaped into block-Hankel matrices which parameterize
//! every trajectory of the underlying system, and each control step solves a
//! convex QP that maps a proposed (possibly unsafe) input to the nearest input
//! admitting a constraint-satisfying backup trajectory that ends inside a
//! terminal safe set. The terminal set itself is learned from data as the
//! convex hull of visited extended states and can be grown online (from
//! closed-loop measurements) or offline (from backup trajectories alone).
//!
//! Module map:
//! - [`plant`]: discrete-time LTI simulator with pure input delay; the
//!   ground-truth oracle for data generation and closed-loop experiments.
//! - [`datamat`]: trajectories, Hankel matrices, persistent-excitation
//!   checks, extended states.
//! - [`consets`]: polytopic input/output constraint sets.
//! - [`qpcore`]: standard-form convex QP and the built-in ADMM solver.
//! - [`safeset`]: sampled terminal safe set in vertex representation.
//! - [`filter`]: the safety filter itself plus the online/offline set
//!   expansion algorithms.
//!
//! All numeric code is generic over the scalar type (see [`Scalar`]);
//! `f64` aliases for the main types live at the crate root.

pub mod consets;
pub mod datamat;
pub mod error;
pub mod filter;
mod lp;
pub mod plant;
pub mod qpcore;
pub mod safeset;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` aliases for the main types (the default instantiation).
pub type Plant64 = plant::DelayedLtiPlant<f64>;
pub type Trajectory64 = datamat::Trajectory<f64>;
pub type HankelPair64 = datamat::HankelPair<f64>;
pub type ExtendedState64 = datamat::ExtendedState<f64>;
pub type Polytope64 = consets::Polytope<f64>;
pub type BoxSet64 = consets::BoxSet<f64>;
pub type QpProblem64 = qpcore::QpProblem<f64>;
pub type QpSolution64 = qpcore::QpSolution<f64>;
pub type SampledSafeSet64 = safeset::SampledSafeSet<f64>;
pub type FilterConfig64 = filter::FilterConfig<f64>;
pub type FilterState64 = filter::FilterState<f64>;

/// `f32` aliases, for callers that trade accuracy for footprint.
pub type Plant32 = plant::DelayedLtiPlant<f32>;
pub type Trajectory32 = datamat::Trajectory<f32>;
pub type HankelPair32 = datamat::HankelPair<f32>;
pub type SampledSafeSet32 = safeset::SampledSafeSet<f32>;
