//! Federated learning simulator with a real-time contribution ledger.
//!
//! The crate simulates synchronous federated training rounds over synthetic
//! agents and, while training runs, maintains a per-agent impact ledger that
//! is normalized into a contribution share after every round. A replay-based
//! Shapley oracle (exact and Monte-Carlo) is included so ledger output can be
//! compared against a game-theoretic ground truth on the same run.
//!
//! Module map:
//! - [`params`]: layered parameter containers and the vector algebra on them
//! - [`model`]: small fixed-architecture models with hand-derived gradients
//! - [`trainer`]: one agent's local SGD pass
//! - [`aggregation`]: cohort selection, layer-wise attention, server updates
//! - [`contribution`]: impact ledger, contribution shares, Shapley estimators
//! - [`scenario`]: synthetic datasets and scripted data corruptions
//! - [`metrics`]: held-out evaluation (accuracy, perplexity)
//! - [`runner`]: round loop, run records, exports, experiment config

// Validations write `!(x > 0.0)` instead of `x <= 0.0` on purpose: the
// negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod contribution;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
