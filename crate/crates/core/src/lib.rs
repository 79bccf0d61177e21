//! Core model of batched speculative decoding.
//!
//! Everything in this crate is pure computation over `alloc` collections so it
//! can run without the standard library:
//!
//!  - [`cost_model`]: linear per-step costs, total-runtime prediction and the
//!    optimal speculation length (continuous root and discrete grid search).
//!  - [`acceptance`]: the censored-mean estimator of expected correct tokens,
//!    its power-law fit and a bootstrap sampler of accepted lengths.
//!  - [`engine`]: the speculate/verify loop at token level and as a timed
//!    batch simulation.
//!  - [`policy`]: profiled lookup tables and fixed baselines that choose the
//!    speculation length for a batch.
//!  - [`traffic`]: Gamma arrival processes and phased schedules.
//!  - [`simulator`]: a discrete-event FIFO server that batches queued
//!    requests and records their latency.
//!
//! Time is measured in milliseconds inside the models and in seconds on
//! request timestamps.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod acceptance;
pub mod cost_model;
pub mod engine;
mod error;
mod math;
pub mod policy;
pub mod rng;
pub mod simulator;
pub mod traffic;

pub use acceptance::{AcceptanceTrace, PowerLawFit};
pub use cost_model::{Calibration, LinearStepModel, OptimalityParams, RuntimePrediction, StepTimeSample};
pub use engine::{BatchResult, DraftOracle, SequenceState, StepOutcome, TokenLevelOracle, TraceSampler};
pub use error::{Error, Result};
pub use policy::{Policy, PolicyDecision, SpeculationLut};
pub use simulator::{RequestRecord, ServerConfig, SimulationReport};
pub use traffic::{PhaseSchedule, Request, TrafficConfig};
