//! Learned dream environments randomized with dropout.
//!
//! The pipeline: collect trajectories from a real environment, fit a
//! dropout-LSTM mixture-density dynamics model with per-sequence masks, roll
//! out dream episodes where a fresh dropout mask defines each transition, and
//! search a linear controller with CMA-ES entirely inside those dreams before
//! testing it once on the real environment.

pub mod container;
pub mod controller;
pub mod dream;
pub mod dropout_lstm;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod trainer;
pub mod world_model;

pub use error::{Error, Result};
