//! Coupled feature-topology graph ODE simulation library.
//!
//! The crate implements three layers:
//!
//! - **Dynamics**: directed consensus flows on row-stochastic operators, the
//!   soft-attention baseline flow, bistable double-well edge potentials with a
//!   learned pairwise force, and the full coupled system ([`dynamics`],
//!   [`force`], [`solver`]).
//! - **Training**: a margin objective aligned with the fold threshold of the
//!   edge potential, plus discretize-then-optimize training through a
//!   fixed-step unroll with exact hand-written reverse-mode gradients
//!   ([`train`]).
//! - **Diagnostics and experiments**: stationary distributions, spectral gaps,
//!   bifurcation scans, hysteresis sweeps, cluster metrics, stochastic block
//!   model generators, and the experiment runners behind the `hgode` CLI
//!   ([`diagnostics`], [`sbm`], [`experiments`]).

pub mod config;
pub mod diagnostics;
pub mod dynamics;
pub mod experiments;
pub mod force;
pub mod graph;
pub mod rng;
pub mod sbm;
pub mod solver;
pub mod train;

pub use diagnostics::{cubic_equilibria, EquilibriumSet, HysteresisTrace};
pub use dynamics::{critical_force, AnnealSchedule, CoupledState, HgodeParams};
pub use force::ForceField;
pub use graph::{CandidatePool, Graph, RowStochasticMatrix};
pub use solver::{integrate_dopri5, integrate_fixed, FixedMethod, SolverConfig, Trajectory};
pub use train::{Readout, TrainConfig};
