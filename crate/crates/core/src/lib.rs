//! Monte Carlo engine for pricing expectations of SDE functionals with
//! neural-network control variates.
//!
//! The engine prices `u(s, x) = E[f(X(T)) Y(T) + Z(T)]` for diffusion and
//! Lévy-driven models in two passes: a coarse first pass records trajectories
//! with the controls switched off, a training stage fits the control networks
//! by minimizing the empirical variance of the replayed payoff functional, and
//! a fine second pass estimates the price with the trained controls active.
//!
//! Module map:
//! * [`models`] — model coefficients, payoffs, Lévy measure machinery
//! * [`schemes`] — Euler, semi-implicit Heston and jump-adapted integrators
//! * [`neuralnet`] — feed-forward networks, reverse-mode gradients, Adam
//! * [`cvtrain`] — two-pass control-variate training and trajectory replay
//! * [`estimators`] — vanilla/controlled/crude/multilevel Monte Carlo
//! * [`oracles`] — closed-form reference prices and the analytic control

pub mod cvtrain;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod models;
pub mod neuralnet;
pub mod oracles;
pub mod quadrature;
pub mod rng;
pub mod schemes;

pub use error::{Error, Result};
