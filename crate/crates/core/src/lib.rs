//! Simulation and estimation for risk-factor studies that recruit at test
//! sites, with population controls.

pub mod data;
pub mod estimators;
pub mod glm;
pub mod harness;
pub mod rng;
pub mod sampling;
pub mod simulator;
