//! Simulation and analysis toolkit for three-state grass/sapling/tree lattice
//! models.
//!
//! Every site of a finite lattice is in state `0` (grass or vacant), `1`
//! (sapling or juvenile) or `2` (tree or adult). Three related processes are
//! supported:
//!
//! * the Staver–Levin forest model, whose sapling growth rate is a
//!   nonincreasing function of the local grass fraction;
//! * Krone's model, the same dynamics with a constant growth rate;
//! * the truncated process, Krone's model with births restricted to pairs of
//!   small boxes lying entirely within interaction range.
//!
//! The crate is organised by subsystem:
//!
//! * [`meanfield`]: the well-mixed ODE, stability of the origin, interior
//!   equilibria and trajectories.
//! * [`lattice`]: geometry, configurations with incrementally maintained
//!   window and small-box counts, snapshots.
//! * [`engine`]: the graphical representation (per-site Poisson mark
//!   streams) driving the three coupled processes, plus a rejection-free
//!   single-model simulator.
//! * [`boxprocess`]: the coarse-grained chain on small-box counts.
//! * [`ide`]: the long-range integro-differential limit, its test functions
//!   and the constants attached to them.
//! * [`diagnostics`]: drift functionals, recovery and branching bounds,
//!   moving-particle laws and wet-box detection.

pub mod boxprocess;
pub mod diagnostics;
pub mod engine;
pub mod ide;
pub mod lattice;
pub mod meanfield;
pub mod params;
pub mod rng;
pub mod stats;
mod sumtree;

pub use params::{Growth, ParamError, RateParams};
