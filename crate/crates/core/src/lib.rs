//! Simulation and analysis toolkit for federated learning when the deployed
//! model reshapes each client's data distribution.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds losses, distribution-shift maps and client populations.
//! * [`solution`] finds performatively stable and performatively optimal points.
//! * [`theory`] evaluates the convergence constants, step-size rules and bounds.
//! * [`engine`] runs the federated averaging loop with full or partial participation.
//! * [`experiments`] builds populations, runs replicates and sweeps, and fits rates.
//!
//! All randomness flows through [`rng::CounterRng`], keyed by seed, stream and
//! step, so traces are reproducible regardless of scheduling.

pub mod engine;
pub mod error;
pub mod experiments;
pub mod model;
pub mod rng;
pub mod solution;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
pub use model::{LossModel, Population, Sample, ShiftMap, Theta};
