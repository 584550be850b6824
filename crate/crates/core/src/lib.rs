//! Particle smoothing for SDEs with sparse observations and terminal
//! constraints, and distillation of the smoother into a neural drift.
//!
//! The pipeline has two halves:
//!
//! 1. [`smoother`] runs MCMC over conditional particle filters with ancestor
//!    sampling (CPF-AS). Observations can be single points, whole sample sets
//!    scored by a nearest-neighbour likelihood ([`observations`]), or samples
//!    of a terminal distribution treated as an observation at `t = T`.
//! 2. [`nn`] fits a drift network `f_θ(x, t)` to the mean-change records the
//!    smoother stores along each retained path. Sampling the SDE
//!    `dx = f_θ dt + g(t) dβ` then approximates the smoothing distribution
//!    without access to the observations.
//!
//! [`metrics`] and [`datasets`] hold evaluation and synthetic experiment
//! setups; [`io`] the CSV formats shared with the command-line runner.

pub mod datasets;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod observations;
pub mod rng;
pub mod sde;
pub mod smoother;

pub use error::{Error, Result};
pub use observations::{ObservationSet, ObservationSlot, SlotMode};
pub use sde::{DiffusionSchedule, Drift, InitSampler, SdeModel, TimeGrid, Trajectory};
pub use smoother::{ChainConfig, ReferenceTrajectory};
