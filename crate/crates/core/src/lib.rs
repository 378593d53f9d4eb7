//! Simulation, quasi-likelihood inference and local asymptotic normality
//! diagnostics for finite-activity jump-diffusions observed at high frequency.

pub mod density;
pub mod error;
pub mod inference;
pub mod lan;
pub mod model;
pub mod optim;
pub mod par;
pub mod quad;
pub mod quasi_lik;
pub mod rng;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
