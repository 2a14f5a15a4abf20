//! Reset-free model-based reinforcement learning.
//!
//! The crate bundles a small differentiable stack ([`approx`]), 2D reset-free
//! environments ([`envs`]), replay storage ([`buffer`]), a dynamics ensemble
//! ([`world_model`]), a learned temporal-distance reward ([`rewards`]), the
//! four imagination-trained heads ([`agents`]), data collection controllers
//! ([`explore`]) and the experiment harness ([`harness`]).

pub mod agents;
pub mod approx;
pub mod buffer;
pub mod envs;
pub mod error;
pub mod explore;
pub mod harness;
pub mod rewards;
pub mod world_model;

pub use error::{Error, Result};

/// Scalar used by everything above the approximation stack.
pub type Real = f64;

pub type Mlp = approx::Mlp<Real>;
pub type Mlp32 = approx::Mlp<f32>;
pub type AdamState = approx::AdamState<Real>;
pub type Normalizer = approx::Normalizer<Real>;
