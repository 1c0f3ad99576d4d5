//! Policy gradient for concave utilities of the discounted state-action
//! occupancy measure on finite MDPs.

pub mod config;
pub mod env;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod mdp;
pub mod optimizer;
pub mod rng;
pub mod utility;

pub use error::{Error, Result};
