//! Shrinking-horizon model predictive control in dynamic environments with
//! conformal prediction regions for the future states of uncontrollable agents.

pub mod conformal;
pub mod constraints;
pub mod dynamics;
pub mod error;
pub mod mpc;
pub mod norm;
pub mod pairs;
pub mod predictor;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};
pub use norm::Norm;
