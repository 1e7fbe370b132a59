//! Multi-agent limit-order-book market simulation and one-shot behavior
//! calibration.
//!
//! The crate is organised bottom-up:
//!
//! - [`lob`]: price-time-priority order book over integer ticks and lots.
//! - [`agents`]: composite fundamentalist/chartist/noise agents with CARA
//!   demand, driven by a [`agents::BehaviorVector`].
//! - [`simulator`]: discrete one-second slots, batch execution at slot end,
//!   order-stream recording.
//! - [`features`]: the 13 stylized-fact statistics of a day's stream and the
//!   reconstruction-error / behavior-variation metrics.
//! - [`diff`]: a small reverse-mode differentiation core (affine, LSTM,
//!   losses, Adam, finite-difference checks, checkpoints).
//! - [`surrogate`]: learned stand-in for the simulator mapping behaviors and
//!   the fundamental path to predicted features.
//! - [`metamarket`]: the calibrator, an LSTM feature encoder plus a
//!   hypernetwork that turns the market state into the weights of the
//!   behavior estimator.
//! - [`baselines`]: per-day random search and GP Bayesian optimization.
//! - [`state`]: the five-indicator market state (CPI, PPI, PMI, trend, noise).
//! - [`harness`]: configuration, synthetic ground-truth benchmark,
//!   calibration pipeline, evaluation reports.

pub mod agents;
pub mod baselines;
pub mod diff;
pub mod error;
pub mod features;
pub mod harness;
pub mod lob;
pub mod metamarket;
pub mod seed;
pub mod simulator;
pub mod state;
pub mod stats;
pub mod surrogate;

pub use agents::BehaviorVector;
pub use error::{Error, LobError, Result};
pub use features::FeatureVector;
pub use simulator::{OrderStream, SimConfig};
