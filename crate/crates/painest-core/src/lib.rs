//! Two-stage estimation of postoperative pain intensity from face videos:
//! a two-stream bilinear CNN produces per-frame descriptors (stage 1), and a
//! small LSTM regresses a 0-7 intensity over 32-frame clips (stage 2).
//! Includes the reverse-mode autodiff engine, data pipeline, synthetic
//! fixture generator, and training/evaluation drivers behind the `painest`
//! CLI.

#![forbid(unsafe_code)]

pub mod backbone;
pub mod bilinear;
pub mod data;
pub mod error;
pub mod nn;
pub mod params;
pub mod rng;
pub mod eval;
pub mod registry;
pub mod temporal;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;

pub use error::{Error, Result};
