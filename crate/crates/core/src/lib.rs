//! Power allocation laboratory for a multi-user downlink with i.i.d. fast fading.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: channel sampling, Shannon rates, reward and queue dynamics.
//! - [`policies`]: fixed, random and water-filling baselines plus a myopic oracle.
//! - [`neural`]: a small fully connected network with manual backprop and Adam.
//! - [`dqn`]: replay, ε-greedy selection, TD targets and the training loop.
//! - [`metrics`]: throughput, Jain fairness, energy efficiency and queue latency.
//! - [`harness`]: config-driven experiments that write CSV/JSON artifacts.

pub mod dqn;
pub mod env;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod policies;
pub mod rng;

pub use error::{Error, Result};
