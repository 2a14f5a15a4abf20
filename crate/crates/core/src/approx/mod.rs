//! Small differentiable function-approximation stack.
//!
//! Every learned component (dynamics members, distance net, policies and
//! values) is an [`Mlp`] trained with [`AdamState`]. All of it is generic over
//! the floating point type through [`Scalar`]; the rest of the crate uses the
//! `f64` instantiation.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod mlp;
mod normalizer;
mod returns;
mod scalar;

pub use adam::{AdamConfig, AdamState, StepOutcome};
pub use gradcheck::{grad_check, grad_check_mlp, relative_error};
pub use mlp::{HiddenActivation, Mlp, OutputActivation, Tape};
pub use normalizer::Normalizer;
pub use returns::{lambda_returns, lambda_returns_vjp};
pub use scalar::Scalar;
