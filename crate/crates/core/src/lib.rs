//! Rainfall field reconstruction from weather radar and sparse rain gauges.
//!
//! The crate bundles a differentiable reconstruction model (radar, rain-front
//! and gauge-graph encoders, a cross-modal aligner and a query decoder), the
//! classical interpolation baselines it is compared against, a synthetic storm
//! generator with controllable radar-to-surface distortions, and the training
//! and evaluation harness.

pub mod aligner;
pub mod autograd;
pub mod baselines;
pub mod datagen;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod geo;
pub mod harness;
pub mod nn;
pub mod normalize;
pub mod objective;

pub use error::{Error, Result};
