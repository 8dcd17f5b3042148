//! Probabilistic closed-loop validation of controllers, with a towing-kite
//! benchmark: simulation, estimation, scenario-tree NMPC, neural-network
//! approximation and family-wise certification from order statistics.

pub mod campaign;
pub mod error;
pub mod estimator;
pub mod indicators;
pub mod mlp;
pub mod msnmpc;
pub mod plant;
pub mod scenario;
mod serde_f64;
pub mod trajectory;
pub mod validation;

pub use error::{Error, Result};
