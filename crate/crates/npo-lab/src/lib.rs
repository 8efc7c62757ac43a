//! npo-lab: a desk-scale laboratory for group-based RL with verifiable rewards.
//!
//! The crate trains a small autoregressive softmax policy on synthetic
//! verifiable tasks with group-relative advantages and a clipped surrogate
//! objective, and extends the plain on-policy loop with *near-future policy
//! guidance*: verified trajectories produced by a later checkpoint of the same
//! run are injected into rollout groups on prompts the current policy is
//! struggling with. An adaptive controller decides online when to intervene
//! and how far to roll back by maximizing an empirical effective-learning-
//! signal ratio estimated from a mistake pool and checkpoint KL drift.
//!
//! Module map:
//!
//! - [`policy`] — the toy softmax policy: sampling, exact log-probabilities,
//!   entropy, and manual backprop for weighted log-likelihood objectives.
//! - [`tasks`] — synthetic prompt generators and the binary verifier.
//! - [`grpo`] — rollout groups, group-relative advantages, the clipped
//!   mixed-policy objective, and the Adam ascent step.
//! - [`guidance`] — the guidance cache and gated slot replacement.
//! - [`checkpoints`] — versioned checkpoint store with bit-exact rollback and
//!   per-token KL measurement between checkpoints.
//! - [`controller`] — the adaptive intervention controller: mistake pool,
//!   two-stage trigger, rollback-distance selection, cooldown.
//! - [`sources`] — alternative guidance trajectory sources (external oracle,
//!   past replay, far-future) and the quality/variance curve measurement.
//! - [`trainer`] — the training loop wiring every mode together.
//! - [`cli`] — command-line entry points (`train`, `measure-qv`, `plot`,
//!   `replay`), configuration, metrics streams, and SVG plotting.

pub mod checkpoints;
pub mod cli;
pub mod config;
pub mod controller;
pub mod error;
pub mod grpo;
pub mod guidance;
pub mod metrics;
pub mod plot;
pub mod policy;
pub mod rng;
pub mod sources;
pub mod tasks;
pub mod trainer;

pub use config::RunConfig;
pub use error::{NpoError, Result};
pub use grpo::{Behavior, OptimizerState, RolloutGroup, Trajectory};
pub use guidance::{GateConfig, GuidanceCache};
pub use policy::{PolicyLayout, PolicyParams, TokenDistribution};
pub use tasks::{Dataset, Prompt};
