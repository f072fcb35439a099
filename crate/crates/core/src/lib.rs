//! Proximal diffusion samplers.
//!
//! Backward (proximal) and forward (score) discretizations of reverse-time
//! diffusion, exact Gaussian-mixture oracles for scores and MAP denoisers,
//! a proximal-matching trainer for learned proximal operators, and exact
//! metrics for comparing the two families.

pub mod datasets;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod prox_match;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod theory;

pub use error::*;
pub use oracle::{GaussianMixture, ProxQuery, ProxResult, ProxSettings};
pub use samplers::{ExactOracle, ForwardProcess, Method, Oracle, SamplerConfig, SamplerTrace};
pub use schedule::{BetaKind, ScheduleSpec, StepWeights, TimeGrid};
