//! Denoising-based contractive imitation learning at desk scale.
//!
//! Two networks are learned from expert transitions `(x_t, a_t, x_{t+1})`:
//! a dynamics model `f` predicting the next state, and a denoising policy
//! `d(x_t, y) -> (x̂_{t+1}, â_t)` trained to recover `x_{t+1}` from a noisy
//! copy `y`. At run time the policy acts with `d(x_t, f(x_t))`.
//!
//! The [`analysis`] module checks the contraction argument numerically.

pub mod analysis;
pub mod data;
pub mod env;
pub mod error;
pub mod loss;
pub mod models;
pub mod net;
pub mod optim;
pub mod rollout;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
