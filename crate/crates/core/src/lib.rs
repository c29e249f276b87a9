//! Extended zero-gradient-sum dynamics for distributed optimization with
//! local equality and inequality constraints.
//!
//! Each agent integrates a Newton-like flow on its local Lagrangian, driven by
//! an auxiliary variable that starts at the local gradient and is steered to
//! zero, after which the network sum of Lagrangian gradients stays at zero and
//! a consensus coupling moves all agents to the common optimum.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod centralized;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod integrator;
pub mod linalg;
pub mod oracle;
pub mod presets;
pub mod problem;
pub mod protocols;
pub mod runner;

pub use error::{Error, Result};
