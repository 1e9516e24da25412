//! Cascaded BS–RIS–user channel estimation toolkit.
//!
//! * [`channel`] synthesizes Saleh–Valenzuela BS–RIS and RIS–user channels
//!   over uniform planar arrays and builds cascaded and grouped channels.
//! * [`pilots`] draws pilot patterns, grouping operators and measurement
//!   matrices, and produces noisy observations plus their tensor encoding.
//! * [`estimators`] holds the LS and LMMSE baselines and the NMSE metric.
//! * [`nn`] is the region-gated mixture-of-experts estimator with exact
//!   backpropagation, Adam and multiply-accumulate accounting.
//! * [`federated`] trains it with synchronous FedAvg across regional clients.
//! * [`harness`] wires configuration, datasets, labels, evaluation and
//!   reporting into end-to-end experiments.

pub mod channel;
pub mod config;
pub mod dataset;
mod error;
pub mod estimators;
pub mod federated;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod pilots;
pub mod rng;

pub use error::{Error, Result};
