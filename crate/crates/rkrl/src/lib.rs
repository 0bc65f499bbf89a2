//! Robust deep Q-learning on a parameterized cart-pole.
//!
//! Two robust agents train against worst-case Bellman targets built from a
//! finite uncertainty set over the cart-pole physics parameters: one updates
//! its Q-network by gradient descent (Adam), the other estimates the weight
//! posterior with an extended Kalman filter. A Double-DQN baseline trains on
//! nominal targets. The eval harness sweeps pole length and cart mass to
//! measure robustness of the learned policies.

pub mod agents;
pub mod config;
pub mod ekf;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod selftest;
pub mod targets;

pub use error::{Error, Result};
