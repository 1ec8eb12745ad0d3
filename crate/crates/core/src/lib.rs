//! Scalar over-the-air federated learning.
//!
//! Devices share a model `θ ∈ ℝᵈ` and upload only two scalars per round over a
//! simulated fading channel. The server never estimates the channel: it takes the
//! real part of two superimposed minislots, multiplies them, and broadcasts the
//! product. Every device multiplies that scalar by a shared Rademacher direction
//! `Φ_k` to obtain a rank-one gradient estimate.
//!
//! Two payloads are supported:
//!
//! * **EZOFL** – zero-order: the payload is the two-point loss difference
//!   `f(θ + γΦ) − f(θ − γΦ)`.
//! * **EFOFL** – first-order: the payload is the projection `∇f(θ)ᵀΦ`.
//!
//! Both have asynchronous three-slot variants, where a subset of late devices
//! sends its precoder symbol while the others send their payload.
//!
//! The crate is organised by role:
//!
//! | module | contents |
//! |---|---|
//! | [`model`] | parameter vectors, losses, analytic and finite-difference gradients |
//! | [`data`] | MNIST IDX reader, synthetic generators, equal partitioning, CSV |
//! | [`channel`] | fading draws, precoder constants, over-the-air minislot sums |
//! | [`estimators`] | the four round estimators, Monte-Carlo moments, closed-form moment bounds |
//! | [`schedules`] | step-size schedules and the iteration-count / rate calculators |
//! | [`trainer`] | the federated round loop, FedAvg baseline, rate measurement |
//! | [`verify`] | Monte-Carlo verification suites for the estimator lemmas |
//! | [`config`], [`cli`] | TOML run configuration and the command implementations behind the binary |
//!
//! Runnable walkthroughs live in `examples/`, one per capability.

pub mod channel;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod estimators;
pub mod model;
pub mod rng;
pub mod schedules;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
