//! Kite plant, wind, integrators and the closed-loop driver.

pub mod integrate;
pub mod kite;
pub mod sim;
pub mod wind;

pub use kite::{glide_ratio, height, kite_rhs, thrust, KiteParams, KiteState};
pub use sim::{
    simulate_closed_loop, ConstantController, ControlAction, Controller, Estimator, Observation,
    SimConfig, StateFeedback,
};
pub use wind::{wind_step, WindParams, WindState};
