//! Growth-environment models with pollution-driven disaster risk.
//!
//! Capital `K` follows an AK technology and is hit by disasters that destroy
//! a state-dependent share of it; pollution `P` accumulates from unabated
//! emissions and decays naturally. The crate provides:
//!
//! * [`model`]: primitives, the Hamiltonian and its maximizer, closed forms;
//! * [`jumps`]: disaster arrival and mark samplers, compensators;
//! * [`simulate`]: controlled path simulation and Monte Carlo value estimates;
//! * [`solver`]: a monotone upwind scheme for the stationary HJB equation
//!   with its nonlocal jump term, solved by policy or value iteration;
//! * [`envelope`]: residuals of the envelope identities on a value field;
//! * [`verify`]: numerical verification checks tying all of the above together;
//! * [`config`] and [`cli`]: the batch front-end behind the binary.

pub mod banded;
pub mod cli;
pub mod config;
pub mod envelope;
pub mod field;
pub mod grid;
pub mod jumps;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod simulate;
pub mod solver;
pub mod verify;

pub use field::{ConsumptionRegime, PolicyField, ValueField};
pub use grid::Grid;
pub use model::{CandidateValue, Control, MarkModel, Model, ModelParams, State, Variant};
pub use simulate::{PathRecord, Policy, ValueEstimate};
pub use solver::{solve, SchemeOpts, SolveReport};
