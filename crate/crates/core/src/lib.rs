//! Identification of discrete-time linear parameter-varying state-space models.
//!
//! The pipeline has three stages:
//!
//! 1. estimate sub-Markov parameters, either one at a time by correlation
//!    analysis ([`cra`]) or jointly by empirical-Bayes regularized FIR
//!    regression ([`fir`]);
//! 2. realize a state-space model from a small selection of them with the
//!    basis-reduced Ho-Kalman scheme ([`realization`]);
//! 3. refine the realization towards the maximum-likelihood estimate by
//!    expectation-maximization ([`em`]) or an enhanced Gauss-Newton
//!    prediction-error search ([`gb`]).
//!
//! [`harness`] wires the stages into Monte-Carlo experiments.

pub mod cra;
pub mod em;
pub mod error;
pub mod fir;
pub mod gb;
pub mod harness;
pub mod linalg;
pub mod markov;
pub mod model;
pub mod realization;

pub use error::{Error, Result};
