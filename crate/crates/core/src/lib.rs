//! Safe distributed optimal output consensus for heterogeneous linear
//! multi-agent systems.
//!
//! Every agent runs a decision layer (gradient tracking plus consensus on a
//! projected decision variable, projected onto a time-expanding subset of the
//! safety zone) and a control layer (state feedback plus regulator
//! feedforward that makes the agent's output track its decision). The
//! expanding set leaves a shrinking safety ball around each decision signal,
//! which keeps outputs inside the safety zone even when the optimum sits on
//! its boundary.
//!
//! Module map:
//!
//! - [`graph`]: communication topology, Laplacian, spectrum.
//! - [`sets`]: convex regions, projections, expanding schedules.
//! - [`objectives`]: local cost functions and their constants.
//! - [`plant`]: agent models, regulator equations, gains, Lyapunov certificates.
//! - [`protocol`]: decision dynamics, control law, parameter feasibility.
//! - [`simulator`]: fixed-step closed-loop integration, oracles, metrics.
//! - [`safety`]: runtime verification of the safety constructs.
//! - [`scenario`] and [`artifacts`]: JSON ingestion and run outputs.

// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod error;
pub mod graph;
pub(crate) mod linalg;
pub mod objectives;
pub mod plant;
pub mod protocol;
pub mod safety;
pub mod scenario;
pub mod sets;
pub mod simulator;

pub use error::{Error, Result};
