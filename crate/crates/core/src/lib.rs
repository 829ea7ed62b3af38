//! Online set-valued classification from bandit feedback.
//!
//! A learner sees a stream of feature vectors, pulls one class "arm" per
//! instance, and observes only whether the pulled arm was the true label.
//! From that single bit it (a) trains a softmax classifier through an
//! inverse-propensity estimate of the label indicator, (b) tracks a
//! per-class conformity-score quantile by stochastic subgradient on a
//! weighted check loss, and (c) emits a prediction set per instance with
//! class-specific coverage diagnostics. An expert ensemble aggregates
//! quantile trackers running at different learning rates so no single
//! rate has to be tuned by hand.
//!
//! The crate is organized around the online loop in [`runner`]:
//!
//! * [`math`] — probability simplex, conformity scores, check loss
//! * [`model`] — linear / one-hidden-layer softmax classifier and SGD
//! * [`policy`] — arm-pulling policies and the unbiased indicator estimate
//! * [`conformal`] — quantile trackers, expert aggregation, prediction sets
//! * [`data`] — synthetic Gaussian-mixture and file-backed record streams
//! * [`metrics`] — accumulative coverage/size metrics and diagnostics
//! * [`config`] — run configuration, key=value files, CLI overrides
//! * [`runner`] — the online loop, replication, learning-rate sweeps
//!
//! With the `parallel` feature (on by default) replications, sweep points
//! and per-batch model evaluation run on the rayon pool; the sequential
//! fallback produces bit-identical output.

pub mod config;
pub mod conformal;
pub mod data;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub(crate) mod par;
pub mod policy;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
