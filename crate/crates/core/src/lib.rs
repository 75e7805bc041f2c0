//! Differentiable if-else program policies for reinforcement learning.
//!
//! A [`relaxed_policy::RelaxedPolicy`] mixes every if-else chain up to a
//! maximum depth, weighted by a learned depth distribution and sigmoid
//! predicate gates. [`trainer`] optimizes it with PPO plus an
//! architecture-entropy penalty whose weight is tuned by dual ascent, so the
//! depth distribution collapses during training. [`extract`] reads off the
//! final [`program::DiscreteProgram`], and [`theory`] checks the
//! discretization-gap identities exactly on tabular MDPs.

pub mod autodiff;
pub mod envs;
pub mod error;
pub mod exec;
pub mod extract;
pub mod gradcheck;
pub mod program;
pub mod relaxed_policy;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
