//! Optimal decentralized control of `N` linear plants coordinated by a remote
//! controller over unreliable uplinks.
//!
//! Each plant has a co-located local controller that observes its state
//! perfectly and reports it to the remote controller through a Bernoulli
//! packet-drop channel; downlinks are perfect. All controllers cooperatively
//! minimize a finite-horizon quadratic cost. The optimal strategies are linear
//! in a shared state estimate (remote controller) and in the local state plus
//! the shared estimate (local controllers), with gains computed offline by a
//! pair of coupled Riccati-type recursions.
//!
//! The crate is organized around that pipeline:
//!
//! - [`model`] — problem instances: plant/cost/noise/channel data, validation,
//!   random generation, JSON (de)serialization.
//! - [`synthesis`] — the backward gain recursions and the value function.
//! - [`estimator`] — the common state estimate shared by all controllers.
//! - [`controller`] — evaluation of the optimal control laws, downlink
//!   message-size accounting.
//! - [`simulator`] — closed-loop rollouts, Monte Carlo cost estimation,
//!   trace export.
//! - [`oracle`] — exact (simulation-free) expected-cost evaluation for any
//!   linear policy of the same structural form, plus stationarity checks.
//! - [`baselines`] — independent special-case implementations (centralized
//!   LQ, always-failed links, decoupled systems, idle controllers) used for
//!   cross-validation.
//! - [`fileio`] — versioned JSON artifacts, run manifests, content hashes.

pub mod baselines;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod fileio;
pub mod model;
pub mod oracle;
pub mod simulator;
pub mod synthesis;

pub use error::{Error, Result};
pub use model::{
    assemble_global, random_model, random_model_with_costs, ChannelSpec, CostSampling,
    CostSchedule, Dims, ModelSpec, NoiseCovariance, NoiseFamily, NoiseSpec, PlantBlock, Violation,
};
pub use synthesis::{synthesize, BeliefSummary, GainSchedule};
