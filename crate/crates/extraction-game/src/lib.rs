//! Simulator and numerical-optimization library for the model-extraction
//! attack/defense game: utilities and AB curves for strategy pairs, a
//! stochastic gradient descent-ascent solver for the min-max bi-level
//! program with implicit-differentiation hypergradients, and empirical
//! verification of the equilibrium and phase-transition theory.

pub mod attack;
pub mod bilevel;
pub mod defense;
pub mod harness;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod theory;

pub use error::{Error, Result};
