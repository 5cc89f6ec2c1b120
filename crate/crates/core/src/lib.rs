//! Simultaneous perturbation stochastic approximation (SPSA) with
//! Bernoulli ±1 and segmented-uniform perturbations.
//!
//! * [`perturbations`]: the two perturbation laws, their moments and the
//!   validity gate.
//! * [`spsa`]: noisy losses, gain schedules, the gradient estimate and the
//!   recursion.
//! * [`theory`]: closed-form one-step MSE comparison between the two laws.
//! * [`experiments`]: paired Monte Carlo harness and t-test.
//! * [`config`] / [`cli`]: JSON configs and the command-line driver.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod perturbations;
pub mod spsa;
pub mod theory;

pub use error::{Result, SpsaError};
pub use perturbations::{DistributionKind, MomentSet, PerturbationDistribution};
pub use spsa::{GainSchedule, LossFunction, LossRegistry, ProblemConfig};
