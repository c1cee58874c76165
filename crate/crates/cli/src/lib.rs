//! Config-driven experiment runner for the neural control-variate Monte
//! Carlo engine.

pub mod config;
pub mod runner;
