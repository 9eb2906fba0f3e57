//! Evidential token uncertainty, generation-trace storage, regime analysis
//! and uncertainty-guided hidden-state probes.

pub mod behavior;
pub mod cli;
pub mod config;
pub mod error;
pub mod evidential;
pub mod probe;
pub mod scoring;
pub mod special;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
